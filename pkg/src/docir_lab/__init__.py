"""Desk-scale laboratory for disentangled object-centric image
representations in visual pick-and-place skill learning."""

from . import autodiff, disentangle, harness, imaging, policy, ppo, simworld

__all__ = ["autodiff", "disentangle", "harness", "imaging", "policy", "ppo",
           "simworld"]
__version__ = "0.1.0"
