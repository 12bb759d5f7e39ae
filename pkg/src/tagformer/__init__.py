"""Music tagging transformer with noisy-student training, on a numpy autodiff core."""

__version__ = "0.1.0"
