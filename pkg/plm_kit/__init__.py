"""
plm-kit: desk-scale protein language model toolkit.

Masked-LM pretraining of a small transformer encoder, one-hidden-layer task
heads, and seed-latent generation of protein sequences, all on a numpy
autodiff core.
"""

__version__ = "0.1.0"
