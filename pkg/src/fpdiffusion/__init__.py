"""Forward SDEs with learnable anisotropic noise and symplectic drift."""

__version__ = "0.1.0"
