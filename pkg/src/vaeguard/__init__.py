"""Adversarial attacks on VAEs and a latent-space HMC defence, at desk scale."""

__version__ = "0.1.0"
