"""Online-learning dual-domain chroma enhancement (OL-DN) at desk scale."""

__version__ = "0.1.0"
