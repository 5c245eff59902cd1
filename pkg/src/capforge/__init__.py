"""CNN-GRU image captioning with caption-to-image reconstruction rescoring."""

__version__ = "0.1.0"
