"""fedchain: decentralized federated learning over a proof-of-work chain."""

__version__ = "0.1.0"
