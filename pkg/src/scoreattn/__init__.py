"""Score Attention aggregation for vision-and-language models, on a small NumPy autodiff core."""

__version__ = "0.1.0"
