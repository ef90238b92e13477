"""Deep BSDE solver for coupled forward-backward SDEs, with convergence-condition checks."""

__version__ = "0.1.0"
