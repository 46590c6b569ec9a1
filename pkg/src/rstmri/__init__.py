"""Dynamic MRI reconstruction: dense CNN frame restoration plus a 3D shifted-window transformer."""

__version__ = "0.1.0"
