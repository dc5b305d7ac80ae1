"""Open-vocabulary human-object interaction detection with interaction-aware
prompts and concept calibration, at desk scale."""

__version__ = "0.1.0"
