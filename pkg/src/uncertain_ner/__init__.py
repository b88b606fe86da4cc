"""Uncertainty-driven retrieval for character-level sequence-labeling NER."""

from uncertain_ner.tagspace import EntitySpan, LabelScheme

__version__ = "0.1.0"

__all__ = ["EntitySpan", "LabelScheme", "__version__"]
