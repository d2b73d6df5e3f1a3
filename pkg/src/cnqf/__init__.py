"""Policy-driven QoS control plane for converged networks, with a deterministic simulation harness."""

__version__ = "0.1.0"
