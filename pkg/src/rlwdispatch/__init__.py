"""Online RL dispatching (expected TD values, standardized edges, LM-UCB pruning) and a marketplace simulator."""

__version__ = "0.1.0"
