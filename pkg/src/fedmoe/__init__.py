"""One-shot federated MoE training simulator: heterogeneous device LMs are
clustered, distilled into MoE base models and fused into a global MoE."""

__version__ = "0.1.0"
