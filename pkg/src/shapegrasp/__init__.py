"""Category-level shape completion for grasping in clutter, with analytic stand-ins."""

__version__ = "0.1.0"
