"""Robust nonlinear MPC with optimised disturbance feedback and model-error overbounds."""

__version__ = "0.1.0"
