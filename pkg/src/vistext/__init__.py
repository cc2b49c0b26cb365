"""Scene text generation pipeline: layout planning + local diffusion rendering."""

__version__ = "0.1.0"
