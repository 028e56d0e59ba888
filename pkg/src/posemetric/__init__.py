"""Contrastive pose-metric learning and nearest-neighbour pose retrieval."""

from posemetric.pose_math import EulerPose, Quat, euler_to_quat, geodesic_distance, quat_to_euler

__version__ = "0.1.0"

__all__ = [
    "EulerPose",
    "Quat",
    "euler_to_quat",
    "geodesic_distance",
    "quat_to_euler",
]
