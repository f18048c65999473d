"""Model-based RL with multinomial-logistic transitions (UCMNLK)."""

__version__ = "0.1.0"
