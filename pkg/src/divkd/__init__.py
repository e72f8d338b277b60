"""Seq2tree equation solver with a latent diversity prior and answer-verified distillation."""

__version__ = "0.1.0"
