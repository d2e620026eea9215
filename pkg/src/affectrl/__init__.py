"""Desk-scale PPO fine-tuning of a dialogue language model against circumplex affect rewards."""

__version__ = "0.1.0"
