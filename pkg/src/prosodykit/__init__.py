"""Speaker-conditioned dual-stream prosody encoder, staged pretraining, retrieval eval."""

__version__ = "0.1.0"
