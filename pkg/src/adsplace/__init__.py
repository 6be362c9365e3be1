"""Diffusion-based adsorbate placement on periodic slabs with synthetic potential-energy oracles."""

__version__ = "0.1.0"
