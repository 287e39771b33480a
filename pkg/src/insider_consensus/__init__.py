"""Insider attacks on multi-agent consensus: scripted environment, learned world model,
personality classifier and a DQN attacker trained inside the world model."""

__version__ = "0.1.0"
