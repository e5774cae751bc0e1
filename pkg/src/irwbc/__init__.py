"""Impact-robust whole-body control for torque-controlled redundant robots."""

__version__ = "0.1.0"
