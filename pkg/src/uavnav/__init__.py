"""Desk-scale benchmark for collision-aware, memory-enhanced depth navigation.

The package covers the full pipeline: procedural cylinder worlds, an analytic
depth camera, collision-aware depth preprocessing, a small reverse-mode
autodiff engine, VAE + LSTM representation learning, PPO policy training, and
a multi-seed evaluation protocol, all behind one CLI.
"""

__version__ = "0.1.0"
