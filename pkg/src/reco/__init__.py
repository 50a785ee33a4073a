"""Retrieval-enhanced contrastive refinement of frozen embeddings."""
