"""Equation discovery for partially observed ODE systems.

Hybrid neural ODEs learn the unknown equations from data; genetic-programming
symbolic regression then turns the trained networks into closed-form
expressions.
"""
__version__ = "0.1.0"
