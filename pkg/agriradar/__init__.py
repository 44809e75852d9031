"""agriradar - radar semantic perception for low-altitude agricultural flight."""

__version__ = "0.1.0"
