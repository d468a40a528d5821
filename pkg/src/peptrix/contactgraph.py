"""Residue contact graphs from CA coordinates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ioformats import CoordSet

DEFAULT_THRESHOLD = 8.0


@dataclass(frozen=True)
class ResidueGraph:
    n: int
    neighbors: tuple[tuple[int, ...], ...]
    coords: CoordSet | None = None

    def adjacency(self) -> np.ndarray:
        """Dense boolean adjacency, self-loops included."""
        adj = np.zeros((self.n, self.n), dtype=bool)
        for i, nbrs in enumerate(self.neighbors):
            adj[i, list(nbrs)] = True
        return adj

    def edges(self) -> set[tuple[int, int]]:
        """Undirected edges (i < j), self-loops excluded."""
        return {(i, j) for i, nbrs in enumerate(self.neighbors) for j in nbrs if i < j}

    @classmethod
    def from_adjacency(cls, adj: np.ndarray, coords: CoordSet | None = None) -> "ResidueGraph":
        adj = np.asarray(adj, dtype=bool)
        adj = adj | adj.T | np.eye(adj.shape[0], dtype=bool)
        nbrs = tuple(tuple(int(j) for j in np.flatnonzero(row)) for row in adj)
        return cls(adj.shape[0], nbrs, coords)


def build_contact_graph(coords: CoordSet, threshold: float = DEFAULT_THRESHOLD) -> ResidueGraph:
    """Connect residues whose CA atoms lie within ``threshold`` Angstrom.

    Chain neighbours (i, i+1) are always connected and every residue carries
    a self-loop, so the graph is connected along the backbone.
    """
    if not threshold > 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    xyz = np.asarray(coords.ca_coords, dtype=np.float64)
    n = xyz.shape[0]
    if n < 2:
        raise ValueError(f"contact graph needs at least 2 residues, got {n}")
    if not np.all(np.isfinite(xyz)):
        raise ValueError("non-finite coordinate")
    diff = xyz[:, None, :] - xyz[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=-1))
    adj = dist <= threshold
    idx = np.arange(n - 1)
    adj[idx, idx + 1] = True
    adj[idx + 1, idx] = True
    return ResidueGraph.from_adjacency(adj, coords)
