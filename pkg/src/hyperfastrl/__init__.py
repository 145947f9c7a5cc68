"""Parameter-conditioned hypernetwork RL for the forced Kuramoto-Sivashinsky equation."""

__version__ = "0.1.0"
