"""Early detection of spatial-temporal incidents from noisy crowdsourced
reports, with Pareto selection of deployment-ready models."""

__version__ = "0.1.0"
