"""Linear-projection alignment between a frozen vision encoder and a frozen causal LM, with
seen/unseen label generalization tests and an FFN key-value probe."""

__version__ = "0.1.0"
