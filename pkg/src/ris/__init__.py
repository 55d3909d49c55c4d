"""Goal-conditioned actor-critic guided by imagined subgoals, on point-mass mazes."""

__version__ = "0.1.0"
