"""Cold-start CTR pipeline with behavior-aligned multimodal item embeddings."""

__version__ = "0.1.0"
