"""Desk-scale marketplace recommender stack.

Hybrid item embeddings built from behavior, text, image, and location
signals; a GRU sequence recommender over those embeddings; bandit feed
re-rankers; an offline/online experimentation harness; and a synthetic
marketplace simulator that ties it all together.
"""

__version__ = "0.1.0"
