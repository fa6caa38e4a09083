"""Zero-shot 3D anomaly detection with learned rendering and geometry prompts."""

__version__ = "0.1.0"
