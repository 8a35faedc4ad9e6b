"""Location-free post-deployment key distribution for static sensor networks."""

from keymesh.topology import ConfigError, Deployment, PlannerInfeasible, SimConfig, deploy, flood

__all__ = ["ConfigError", "Deployment", "PlannerInfeasible", "SimConfig", "deploy", "flood"]
__version__ = "0.1.0"
