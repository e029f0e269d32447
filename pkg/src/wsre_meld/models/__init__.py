"""Built-in example models."""

from .gaussian import FlatModel, GaussianTestbed, gaussian_testbed
from .h1n1 import IcuData, IcuModel, SeverityModel, h1n1_icu, h1n1_severity, h1n1_synthetic
from .hiv import HivData, HivModel, hiv_joint, hiv_links

__all__ = [
    "FlatModel", "GaussianTestbed", "gaussian_testbed",
    "IcuData", "IcuModel", "SeverityModel", "h1n1_icu", "h1n1_severity", "h1n1_synthetic",
    "HivData", "HivModel", "hiv_joint", "hiv_links",
]
