"""EEG emotion recognition with a spatial-temporal transformer and an
intensity-aware curriculum, built on a small numpy autodiff core."""

__version__ = "0.1.0"
