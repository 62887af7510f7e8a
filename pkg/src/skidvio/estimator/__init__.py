"""Sliding-window visual / inertial / wheel-odometry estimator."""
from .factors import (ImuFactor, ManifoldFactor, OdometryFactor, PriorFactor, VisualFactor,
                      manifold_jacobians, manifold_residual, visual_jacobians, visual_residual)
from .solver import Layout, marginalize, solve
from .triangulate import triangulate
from .window import (XI_ALL, XI_ICR, XI_NONE, EstimatorConfig, KeyframeRecord, SlidingWindowEstimator,
                     SlidingWindowState, should_create_keyframe)
