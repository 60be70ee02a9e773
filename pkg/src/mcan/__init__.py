"""Multi-cast attention ranking of text pairs, on a small numpy autodiff core."""

__version__ = "0.1.0"
