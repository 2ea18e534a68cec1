"""Transfer-operator numerics and Monte Carlo limit-theorem checks for interval maps."""
__version__ = "0.1.0"
