"""wordsem: a desk-scale lab for joint word-image / semantic-concept embeddings."""

__version__ = "0.1.0"
