"""Next-visit diagnosis prediction for longitudinal Alzheimer's cohorts."""

__version__ = "0.1.0"
