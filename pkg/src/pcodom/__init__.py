"""Learning-based lidar odometry from panoramic depth images."""

__version__ = "0.1.0"
