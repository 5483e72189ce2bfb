"""Fisher-information layer ranking and surgical fine-tuning."""

__version__ = "0.1.0"
