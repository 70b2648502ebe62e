"""Imitation-learning and PPO benchmark for a 2D racing car."""
