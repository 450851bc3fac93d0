"""carom: monocular traffic-camera 3D vehicle tracking and scene replay."""

__version__ = "0.1.0"
