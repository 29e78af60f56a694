"""Pressure-robust Crouzeix-Raviart discretizations of nonlinear Stokes flow."""

__version__ = "0.1.0"
