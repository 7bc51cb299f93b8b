"""Airway morphometry toolkit: synthetic patch generation, perceptual-loss
refinement, CNN ellipse regression, FWHM baseline measurement, 3-D patch
extraction, taper biomarkers and survival analysis."""

__version__ = "0.1.0"
