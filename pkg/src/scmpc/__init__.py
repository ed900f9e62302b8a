"""Successive-convexification MPC for difference-of-convex dynamics.

Nominal and tube-based robust nonlinear model predictive control where each
online subproblem is a structured convex program solved by a built-in
primal-dual interior-point method.
"""

__version__ = "0.1.0"
