"""MLS-MPM cutting simulator with a residual PPO policy for bone avoidance."""

__version__ = "0.1.0"
