"""Joint tomographic reconstruction from scans of one object in several rigid poses."""

__version__ = "0.1.0"
