"""Desk-scale ultrasound imaging pipeline: annotation cleaning, masked
autoencoder pretraining, fine-tuning and evaluation."""

__version__ = "0.1.0"
