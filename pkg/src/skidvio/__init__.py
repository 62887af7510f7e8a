"""Visual-inertial-wheel odometry for skid-steering robots with online ICR kinematic calibration."""
__version__ = "0.1.0"
