"""Per-user explainable decision-tree recommender built by learned
tree-generation networks."""

__version__ = "0.1.0"
