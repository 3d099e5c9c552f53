"""tribind: a desk-scale laboratory for tri-modality contrastive binding."""

__version__ = "0.1.0"
