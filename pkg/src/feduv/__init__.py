"""Federated-learning simulator for classifier-variance and representation-uniformity regularized local training."""

__version__ = "0.1.0"
