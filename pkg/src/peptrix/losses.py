"""Contrastive (InfoNCE), binary cross-entropy and hybrid objectives."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numkit as nk

DEFAULT_TAU = 0.07
DEFAULT_LAMBDA = 0.5
LAMBDA_SWEEP = (0.01, 0.1, 0.5)


@dataclass(frozen=True)
class LossConfig:
    tau: float = DEFAULT_TAU
    lam: float = DEFAULT_LAMBDA

    def __post_init__(self) -> None:
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not self.lam >= 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    classification: float
    contrastive: float


def cosine_sim(u, v) -> float:
    u = np.ravel(np.asarray(u, dtype=np.float64))
    v = np.ravel(np.asarray(v, dtype=np.float64))
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ZeroDivisionError("cosine similarity of a zero-norm vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def _as_batch(z: nk.Node | Sequence[nk.Node]) -> nk.Node:
    return z if isinstance(z, nk.Node) else nk.concat_rows(list(z))


def info_nce(z_seq: nk.Node | Sequence[nk.Node], z_struct: nk.Node | Sequence[nk.Node], tau: float) -> nk.Node:
    """Symmetric InfoNCE over N aligned pairs (row i of each side is a positive pair).

    Each side contributes -log softmax of the cosine similarities at the
    matching index; the result is the mean over both perspectives and all
    pairs.
    """
    zs, zt = _as_batch(z_seq), _as_batch(z_struct)
    if zs.shape != zt.shape:
        raise nk.ShapeError(f"info_nce: {zs.shape} vs {zt.shape}")
    n = zs.shape[0]
    if n < 2:
        raise ValueError(f"info_nce needs at least 2 pairs, got {n}")
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    sim = nk.scale(nk.matmul(nk.normalize_rows(zs), nk.transpose(nk.normalize_rows(zt))), 1.0 / tau)
    eye = nk.constant(np.eye(n))
    seq_view = nk.sum_all(nk.mul(nk.log_softmax_rows(sim), eye))
    struct_view = nk.sum_all(nk.mul(nk.log_softmax_rows(nk.transpose(sim)), eye))
    return nk.scale(nk.add(seq_view, struct_view), -1.0 / (2 * n))


def bce(p: nk.Node, y: int) -> nk.Node:
    return nk.bce(p, y)


def hybrid(cls: nk.Node, con: nk.Node | None, lam: float) -> tuple[nk.Node, LossBreakdown]:
    """cls + lam * con. ``con`` may be None when the batch has a single pair."""
    c = cls.item()
    if con is None or lam == 0.0:
        # total is the classification node itself, so lam=0 cannot perturb gradients
        k = 0.0 if con is None else con.item()
        return cls, LossBreakdown(c, c, k)
    k = con.item()
    total = nk.add(cls, nk.scale(con, lam))
    return total, LossBreakdown(total.item(), c, k)
