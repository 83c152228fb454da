"""Small CNN ensembles for two-class chest X-ray classification with
gradient-saliency explanations."""

__version__ = "0.1.0"
