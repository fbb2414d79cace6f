"""Single-image human body reshaping: fit a parametric model, edit, resynthesize."""

__version__ = "0.1.0"
