"""Compositional synthesis of certified neural policies for reach-avoid
specifications over stochastic systems."""

__version__ = "0.1.0"
