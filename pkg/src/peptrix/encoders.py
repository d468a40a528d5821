"""Sequence embedding providers and the graph-attention structure encoder."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from . import numkit as nk
from .contactgraph import ResidueGraph
from .ioformats import ALPHABET, EmbeddingFile, FormatError, Peptide

ACTIVATIONS = {"gelu": nk.gelu, "relu": nk.relu}

TABLE_INIT_STD = 0.1

_RESIDUE_INDEX = {aa: i for i, aa in enumerate(ALPHABET)}


class EmbeddingProvider(Protocol):
    dim: int

    def encode(self, peptide: Peptide) -> nk.Node: ...

    def parameters(self) -> dict[str, nk.Node]: ...


def glorot(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


def sinusoidal_positions(n: int, dim: int) -> np.ndarray:
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (i - i % 2) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def residue_indices(peptide: Peptide) -> list[int]:
    return [_RESIDUE_INDEX[r] for r in peptide.residues]


class TableProvider:
    """Trainable 21-row residue table (20 amino acids + X) plus fixed
    sinusoidal position signal."""

    def __init__(self, dim: int, rng: np.random.Generator | None = None, table: np.ndarray | None = None):
        if table is None:
            rng = rng or np.random.default_rng(0)
            table = rng.normal(0.0, TABLE_INIT_STD, size=(len(ALPHABET), dim))
        self.dim = dim
        self.table = nk.parameter(table, name="seq.table")
        if self.table.shape != (len(ALPHABET), dim):
            raise ValueError(f"residue table must be {len(ALPHABET)} x {dim}, got {self.table.shape}")
        self._positions: dict[int, nk.Node] = {}

    def encode(self, peptide: Peptide) -> nk.Node:
        n = len(peptide)
        pos = self._positions.get(n)
        if pos is None:
            pos = self._positions[n] = nk.constant(sinusoidal_positions(n, self.dim))
        return nk.add(nk.gather_rows(self.table, residue_indices(peptide)), pos)

    def parameters(self) -> dict[str, nk.Node]:
        return {"seq.table": self.table}


class FileProvider:
    """Rows read from a precomputed embedding cache.

    When the cache dimension differs from the model dimension the rows pass
    through a trainable linear projection; otherwise they are returned as is.
    """

    def __init__(
        self,
        cache: EmbeddingFile,
        dim: int,
        rng: np.random.Generator | None = None,
        proj: np.ndarray | None = None,
    ):
        self.cache = cache
        self.dim = dim
        self.proj: nk.Node | None = None
        if cache.dim != dim:
            if proj is None:
                proj = glorot(rng or np.random.default_rng(0), cache.dim, dim)
            self.proj = nk.parameter(proj, name="seq.proj")
            if self.proj.shape != (cache.dim, dim):
                raise ValueError(f"projection must be {cache.dim} x {dim}, got {self.proj.shape}")

    def encode(self, peptide: Peptide) -> nk.Node:
        rows = self.cache.entries.get(peptide.id)
        if rows is None:
            raise KeyError(f"no cached embedding for peptide {peptide.id!r}")
        if rows.shape[0] != len(peptide):
            raise FormatError(
                f"cached embedding for {peptide.id!r} has {rows.shape[0]} rows, "
                f"sequence has {len(peptide)} residues"
            )
        s = nk.constant(rows.astype(np.float64))
        return s if self.proj is None else nk.matmul(s, self.proj)

    def parameters(self) -> dict[str, nk.Node]:
        return {} if self.proj is None else {"seq.proj": self.proj}


def seq_encode(peptide: Peptide, provider: EmbeddingProvider) -> nk.Node:
    return provider.encode(peptide)


@dataclass
class GatLayerParams:
    """Per-head weights: ``W[h]`` is d_head x d_in, ``a[h]`` is (2 d_head) x 1."""

    W: list[nk.Node]
    a: list[nk.Node]
    activation: str = "gelu"
    slope: float = 0.2

    def __post_init__(self) -> None:
        if not self.W or len(self.W) != len(self.a):
            raise ValueError("need one W and one a per head")
        d_head, d_in = self.W[0].shape
        for w, a in zip(self.W, self.a):
            if w.shape != (d_head, d_in):
                raise nk.ShapeError(f"head weight shape {w.shape} differs from {(d_head, d_in)}")
            if a.shape != (2 * d_head, 1):
                raise nk.ShapeError(f"attention vector must be {2 * d_head} x 1, got {a.shape}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def heads(self) -> int:
        return len(self.W)

    @property
    def d_in(self) -> int:
        return self.W[0].shape[1]

    @property
    def d_out(self) -> int:
        return self.W[0].shape[0] * self.heads

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        d_in: int,
        d_out: int,
        heads: int = 1,
        activation: str = "gelu",
        prefix: str = "gat",
    ) -> "GatLayerParams":
        if heads < 1 or d_out % heads:
            raise ValueError(f"output dim {d_out} is not divisible by {heads} heads")
        d_head = d_out // heads
        W = [nk.parameter(glorot(rng, d_head, d_in), name=f"{prefix}.W{h}") for h in range(heads)]
        a = [nk.parameter(glorot(rng, 2 * d_head, 1), name=f"{prefix}.a{h}") for h in range(heads)]
        return cls(W, a, activation)

    def parameters(self) -> list[nk.Node]:
        return [*self.W, *self.a]


@dataclass
class AttentionCoefficients:
    """Dense per-head score matrices; entries outside the neighbourhood are
    zero in ``alpha`` and meaningless in ``raw``."""

    raw: np.ndarray  # heads x n x n, e_ij
    alpha: np.ndarray  # heads x n x n
    mask: np.ndarray  # n x n

    def neighbors(self, i: int, head: int = 0) -> dict[int, float]:
        return {int(j): float(self.alpha[head, i, j]) for j in np.flatnonzero(self.mask[i])}

    def raw_scores(self, i: int, head: int = 0) -> dict[int, float]:
        return {int(j): float(self.raw[head, i, j]) for j in np.flatnonzero(self.mask[i])}


def gat_layer(
    h: nk.Node, graph: ResidueGraph, params: GatLayerParams
) -> tuple[nk.Node, AttentionCoefficients]:
    n = graph.n
    if h.shape != (n, params.d_in):
        raise nk.ShapeError(f"gat_layer: features {h.shape} do not fit graph of {n} nodes and d_in {params.d_in}")
    mask = graph.adjacency()
    assert mask.diagonal().all(), "every node needs a self-loop"
    ones_row = nk.constant(np.ones((1, n)))
    ones_col = nk.constant(np.ones((n, 1)))
    act = ACTIVATIONS[params.activation]
    outs, raws, alphas = [], [], []
    for W, a in zip(params.W, params.a):
        d_head = W.shape[0]
        wh = nk.matmul(h, nk.transpose(W))
        # a^T [Wh_i || Wh_j] = a_src . Wh_i + a_dst . Wh_j
        src = nk.matmul(wh, nk.slice_rows(a, 0, d_head))
        dst = nk.matmul(wh, nk.slice_rows(a, d_head, 2 * d_head))
        scores = nk.add(nk.matmul(src, ones_row), nk.matmul(ones_col, nk.transpose(dst)))
        e = nk.leaky_relu(scores, params.slope)
        alpha = nk.masked_softmax_rows(e, mask)
        outs.append(act(nk.matmul(alpha, wh)))
        raws.append(e.value)
        alphas.append(alpha.value)
    out = outs[0]
    for extra in outs[1:]:
        out = nk.concat_cols(out, extra)
    return out, AttentionCoefficients(np.stack(raws), np.stack(alphas), mask)


def gat_encode(
    h0: nk.Node, graph: ResidueGraph, layers: list[GatLayerParams]
) -> tuple[nk.Node, list[AttentionCoefficients]]:
    if not layers:
        raise ValueError("gat_encode needs at least one layer")
    width = h0.shape[1]
    for k, layer in enumerate(layers):
        if layer.d_in != width:
            raise nk.ShapeError(f"layer {k} expects d_in {layer.d_in}, previous width is {width}")
        width = layer.d_out
    h, coeffs = h0, []
    for layer in layers:
        h, c = gat_layer(h, graph, layer)
        coeffs.append(c)
    return h, coeffs


@dataclass
class ModalEmbeddings:
    S: nk.Node
    G: nk.Node
    coefficients: list[AttentionCoefficients] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.S.shape != self.G.shape:
            raise nk.ShapeError(f"sequence {self.S.shape} and structure {self.G.shape} embeddings differ")

    @property
    def d(self) -> int:
        return self.S.shape[1]
