"""Cover-song embeddings from dominant-melody salience."""

__version__ = "0.1.0"
