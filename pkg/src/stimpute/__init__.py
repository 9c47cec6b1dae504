"""Graph recurrent imputation of whole-field dynamics from sequential patch scans."""

__version__ = "0.1.0"
