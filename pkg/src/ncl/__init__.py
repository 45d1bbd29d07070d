"""Network consensus library: nonlinear consensus schemes for DGD and NEXT."""

__version__ = "0.1.0"
