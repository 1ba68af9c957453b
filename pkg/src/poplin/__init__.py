"""Policy-network-guided CEM planning with learned dynamics ensembles."""

__version__ = "0.1.0"
