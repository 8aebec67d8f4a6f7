"""Differentiable position-based fluid simulation and suction-nozzle MPC."""
