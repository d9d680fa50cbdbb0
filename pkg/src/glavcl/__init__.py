"""Global-local audio-visual contrastive learning on synthetic data."""

__version__ = "0.1.0"
