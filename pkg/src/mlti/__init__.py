"""Meta-learning laboratory: episodic learners with task interpolation.

Subpackages:
  autodiff      reverse-mode differentiation engine (first and second order)
  tasks         synthetic task banks and episode samplers
  interpolation task-interpolation engine (mixup / manifold mixup / cutmix)
  learners      MAML-family and prototype-network learners
  theory        numerical checks of the interpolation regularization analysis
  harness       experiment orchestration, metrics, confidence intervals
"""

__version__ = "0.1.0"
