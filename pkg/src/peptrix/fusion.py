"""Bidirectional co-attention between sequence and structure embeddings,
mean pooling, and the logistic classifier head."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numkit as nk
from .encoders import glorot

SEQ = "seq"
STRUCT = "struct"


@dataclass
class CoAttentionParams:
    """Separate query/key/value projections (d x d_k) for each direction."""

    s2g_q: nk.Node
    s2g_k: nk.Node
    s2g_v: nk.Node
    g2s_q: nk.Node
    g2s_k: nk.Node
    g2s_v: nk.Node

    def __post_init__(self) -> None:
        shape = self.s2g_q.shape
        if shape[1] < 1:
            raise ValueError("d_k must be at least 1")
        for node in self.parameters():
            if node.shape != shape:
                raise nk.ShapeError(f"co-attention projection {node.name} has shape {node.shape}, expected {shape}")

    @property
    def d(self) -> int:
        return self.s2g_q.shape[0]

    @property
    def d_k(self) -> int:
        return self.s2g_q.shape[1]

    def parameters(self) -> list[nk.Node]:
        return [self.s2g_q, self.s2g_k, self.s2g_v, self.g2s_q, self.g2s_k, self.g2s_v]

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, d_k: int | None = None, prefix: str = "coatt") -> "CoAttentionParams":
        d_k = d if d_k is None else d_k
        if d_k < 1:
            raise ValueError(f"d_k must be at least 1, got {d_k}")
        names = ("s2g_q", "s2g_k", "s2g_v", "g2s_q", "g2s_k", "g2s_v")
        return cls(*(nk.parameter(glorot(rng, d, d_k), name=f"{prefix}.{n}") for n in names))


@dataclass
class AttentionMap:
    """Row-stochastic n_q x n_k weights with axis labels."""

    weights: np.ndarray
    query: str = SEQ
    key: str = STRUCT
    row_labels: tuple[str, ...] = ()
    col_labels: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        n_q, n_k = self.weights.shape
        if not self.row_labels:
            self.row_labels = tuple(str(i + 1) for i in range(n_q))
        if not self.col_labels:
            self.col_labels = tuple(str(j + 1) for j in range(n_k))
        if len(self.row_labels) != n_q or len(self.col_labels) != n_k:
            raise ValueError(
                f"{len(self.row_labels)} row / {len(self.col_labels)} column labels "
                f"for a {n_q} x {n_k} map"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape


def residue_labels(residues: str) -> tuple[str, ...]:
    """'PKL' -> ('P1', 'K2', 'L3')."""
    return tuple(f"{r}{i}" for i, r in enumerate(residues, start=1))


def _attend(q_in: nk.Node, kv_in: nk.Node, wq: nk.Node, wk: nk.Node, wv: nk.Node) -> tuple[nk.Node, nk.Node]:
    q = nk.matmul(q_in, wq)
    k = nk.matmul(kv_in, wk)
    v = nk.matmul(kv_in, wv)
    scores = nk.scale(nk.matmul(q, nk.transpose(k)), 1.0 / math.sqrt(wq.shape[1]))
    weights = nk.softmax_rows(scores)
    return nk.matmul(weights, v), weights


def co_attend(
    S: nk.Node, G: nk.Node, params: CoAttentionParams, residues: str | None = None
) -> tuple[nk.Node, nk.Node, tuple[AttentionMap, AttentionMap]]:
    """Structure-aware sequence S' and sequence-aware structure G'.

    Returns both outputs plus the S->G and G->S attention maps.
    """
    if S.shape != G.shape:
        raise nk.ShapeError(f"co_attend: S {S.shape} and G {G.shape} differ")
    if S.shape[1] != params.d:
        raise nk.ShapeError(f"co_attend: embeddings have d={S.shape[1]}, projections expect {params.d}")
    s_new, w_sg = _attend(S, G, params.s2g_q, params.s2g_k, params.s2g_v)
    g_new, w_gs = _attend(G, S, params.g2s_q, params.g2s_k, params.g2s_v)
    labels = residue_labels(residues) if residues else ()
    maps = (
        AttentionMap(w_sg.value.copy(), SEQ, STRUCT, labels, labels),
        AttentionMap(w_gs.value.copy(), STRUCT, SEQ, labels, labels),
    )
    return s_new, g_new, maps


@dataclass
class SummaryVector:
    z: nk.Node  # 1 x d
    modality: str

    @property
    def d(self) -> int:
        return self.z.shape[1]


def pool(X: nk.Node, modality: str = SEQ) -> SummaryVector:
    """Mean over residues (rows)."""
    n = X.shape[0]
    weights = nk.constant(np.full((1, n), 1.0 / n))
    return SummaryVector(nk.matmul(weights, X), modality)


@dataclass
class ClassifierHead:
    W: nk.Node  # 1 x 2d
    b: nk.Node  # 1 x 1

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, prefix: str = "head") -> "ClassifierHead":
        return cls(nk.parameter(glorot(rng, 1, 2 * d), name=f"{prefix}.W"), nk.parameter(np.zeros((1, 1)), name=f"{prefix}.b"))

    def parameters(self) -> list[nk.Node]:
        return [self.W, self.b]


def classify(z_seq: SummaryVector, z_struct: SummaryVector, head: ClassifierHead) -> nk.Node:
    if z_seq.d != z_struct.d or head.W.shape != (1, z_seq.d + z_struct.d):
        raise nk.ShapeError(
            f"classify: summary dims {z_seq.d}/{z_struct.d} do not fit head {head.W.shape}"
        )
    joint = nk.concat_cols(z_seq.z, z_struct.z)
    logit = nk.add(nk.matmul(joint, nk.transpose(head.W)), head.b)
    return nk.sigmoid(logit)


def stack(vectors: Sequence[SummaryVector]) -> nk.Node:
    return nk.concat_rows([v.z for v in vectors])
