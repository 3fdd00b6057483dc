"""Decentralized swarm LiDAR-inertial odometry on simulated drones."""

__version__ = "0.1.0"
