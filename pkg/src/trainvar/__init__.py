"""Training-variability toolkit: Monte Carlo arithmetic, a small numpy CNN
engine, perturbation families and the statistics to compare them."""

__version__ = "0.1.0"
