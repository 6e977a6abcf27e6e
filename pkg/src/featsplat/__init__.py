"""Multi-channel differentiable Gaussian splatting with feature distillation, scene editing and grasp ranking."""
__version__ = "0.1.0"
