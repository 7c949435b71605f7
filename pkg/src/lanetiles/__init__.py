"""Semi-local BEV tile toolkit for 3D lane detection experiments."""

__version__ = "0.1.0"
