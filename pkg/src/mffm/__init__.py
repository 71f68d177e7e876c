"""Multi-fidelity flow matching: cascaded one-step residual refiners for PDE fields."""

__version__ = "0.1.0"
