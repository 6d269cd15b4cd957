"""conflictlab: discovers conflict-inducing conditions for pairs of
network-control policies using only marginal single-policy datasets."""

__version__ = "0.1.0"
