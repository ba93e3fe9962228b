"""View-aware attribute recognition with regional attention, on a small autodiff core."""

__version__ = "0.1.0"
