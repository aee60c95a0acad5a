"""Model-based reinforcement learning for crowd navigation from 2D laser scans."""

__version__ = "0.1.0"
