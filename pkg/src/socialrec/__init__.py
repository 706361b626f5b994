"""Graph neural recommender over social, item-knowledge, and typed
temporal interaction structures, trained with a pairwise ranking
objective and a contrastive node-component readout loss."""

__version__ = "0.1.0"
