"""Two-stage knowledge base completion with a cross-entity aware reranker."""

__version__ = "0.1.0"
