"""Chain event graph reliability models with a remedial-intervention calculus."""

__version__ = "0.1.0"
