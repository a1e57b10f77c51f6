"""Set complement task laboratory: a minimal attention-only transformer,
its hardcoded solution, executable checks of the rank/precision results,
BEMA-stabilized training, random hyperparameter search and Othello data."""

__version__ = "0.1.0"
