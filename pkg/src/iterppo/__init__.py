"""Iterative PPO: multi-turn conversational RL solved as a sequence of single-turn token-level PPO problems."""

__version__ = "0.1.0"
