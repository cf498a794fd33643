"""Siamese adversarial denoising and gate-to-gate motion estimation for
low-dose gated PET, exercised on synthetic gated phantoms."""

__version__ = "0.1.0"
