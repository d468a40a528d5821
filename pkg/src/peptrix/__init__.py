"""Multimodal peptide classification: graph attention over residue contact
graphs, sequence embeddings, bidirectional co-attention and a hybrid
classification + contrastive objective."""

__version__ = "0.1.0"
