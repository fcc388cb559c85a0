"""Mean-field LQG leader-follower games with multiplicative noise."""

__version__ = "0.1.0"
