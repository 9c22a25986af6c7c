"""Desk-scale asynchronous RL training testbed.

Interruptible streaming rollout, staleness-gated data admission, a
decoupled PPO trainer, and a discrete-event timeline model quantifying the
throughput advantage of asynchrony over synchronous batch alternation.
"""

__version__ = "0.1.0"
