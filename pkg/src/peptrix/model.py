"""The full classifier: sequence provider, GAT structure encoder,
co-attention fusion and logistic head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import numkit as nk
from .contactgraph import DEFAULT_THRESHOLD, ResidueGraph, build_contact_graph
from .encoders import (
    AttentionCoefficients,
    EmbeddingProvider,
    FileProvider,
    GatLayerParams,
    ModalEmbeddings,
    TableProvider,
    gat_encode,
    seq_encode,
)
from .fusion import (
    SEQ,
    STRUCT,
    AttentionMap,
    ClassifierHead,
    CoAttentionParams,
    SummaryVector,
    classify,
    co_attend,
    pool,
)
from .ioformats import CoordSet, EmbeddingFile, Peptide
from .losses import LossBreakdown, LossConfig, bce, hybrid, info_nce


@dataclass
class ModelConfig:
    dim: int = 64
    heads: int = 1
    layers: int = 2
    activation: str = "gelu"
    d_k: int | None = None
    threshold: float = DEFAULT_THRESHOLD
    provider: str = "table"  # "table" or "file"
    # which summary vectors the contrastive term aligns: encoder outputs or fused outputs
    contrastive_source: str = "encoder"

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ValueError(f"dim must be positive, got {self.dim}")
        if self.heads < 1 or self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by {self.heads} heads")
        if self.layers < 1:
            raise ValueError("need at least one GAT layer")
        if self.provider not in ("table", "file"):
            raise ValueError(f"unknown provider {self.provider!r}")
        if self.contrastive_source not in ("encoder", "fusion"):
            raise ValueError(f"unknown contrastive_source {self.contrastive_source!r}")
        if not self.threshold > 0:
            raise ValueError(f"threshold must be positive, got {self.threshold}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Sample:
    peptide: Peptide
    graph: ResidueGraph

    @classmethod
    def build(cls, peptide: Peptide, coords: CoordSet, threshold: float = DEFAULT_THRESHOLD) -> "Sample":
        coords.check_matches(peptide)
        return cls(peptide, build_contact_graph(coords, threshold))


@dataclass
class Forward:
    embeddings: ModalEmbeddings
    S_fused: nk.Node
    G_fused: nk.Node
    maps: tuple[AttentionMap, AttentionMap]
    z_seq: SummaryVector
    z_struct: SummaryVector
    prob: nk.Node
    coefficients: list[AttentionCoefficients] = field(default_factory=list)


class PeptideClassifier:
    def __init__(
        self,
        config: ModelConfig,
        seed: int = 0,
        cache: EmbeddingFile | None = None,
        weights: dict[str, np.ndarray] | None = None,
    ):
        self.config = config
        rng = np.random.default_rng(seed)
        d = config.dim
        if config.provider == "table":
            self.provider: EmbeddingProvider = TableProvider(d, rng)
        else:
            if cache is None:
                raise ValueError("file provider needs an embedding cache")
            self.provider = FileProvider(cache, d, rng)
        self.gat = [
            GatLayerParams.init(rng, d, d, config.heads, config.activation, prefix=f"gat.{k}")
            for k in range(config.layers)
        ]
        self.coatt = CoAttentionParams.init(rng, d, config.d_k)
        self.head = ClassifierHead.init(rng, self.coatt.d_k)
        if weights is not None:
            self.load_weights(weights)

    def parameters(self) -> dict[str, nk.Node]:
        params = dict(self.provider.parameters())
        for layer in self.gat:
            params.update({p.name: p for p in layer.parameters()})
        params.update({p.name: p for p in self.coatt.parameters()})
        params.update({p.name: p for p in self.head.parameters()})
        return params

    def state(self) -> dict[str, np.ndarray]:
        return {name: node.value.copy() for name, node in self.parameters().items()}

    def load_weights(self, weights: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(weights)
        extra = set(weights) - set(params)
        if missing or extra:
            raise ValueError(f"weight names do not match model (missing {sorted(missing)}, unexpected {sorted(extra)})")
        for name, node in params.items():
            value = np.asarray(weights[name], dtype=np.float64)
            if value.shape != node.shape:
                raise ValueError(f"{name}: shape {value.shape}, model expects {node.shape}")
            node.value[...] = value

    def sample(self, peptide: Peptide, coords: CoordSet) -> Sample:
        return Sample.build(peptide, coords, self.config.threshold)

    def forward(self, sample: Sample) -> Forward:
        peptide = sample.peptide
        S = seq_encode(peptide, self.provider)
        G, coeffs = gat_encode(S, sample.graph, self.gat)
        emb = ModalEmbeddings(S, G, coeffs)
        S2, G2, maps = co_attend(S, G, self.coatt, peptide.residues)
        z_seq, z_struct = pool(S2, SEQ), pool(G2, STRUCT)
        prob = classify(z_seq, z_struct, self.head)
        return Forward(emb, S2, G2, maps, z_seq, z_struct, prob, coeffs)

    def contrastive_pair(self, fwd: Forward) -> tuple[nk.Node, nk.Node]:
        if self.config.contrastive_source == "fusion":
            return fwd.z_seq.z, fwd.z_struct.z
        return pool(fwd.embeddings.S, SEQ).z, pool(fwd.embeddings.G, STRUCT).z

    def batch_loss(self, batch: Sequence[Sample], loss: LossConfig) -> tuple[nk.Node, LossBreakdown]:
        """Hybrid loss of one mini-batch; the contrastive term needs >= 2 samples."""
        if not batch:
            raise ValueError("empty batch")
        cls_terms, zs, zt = [], [], []
        for s in batch:
            if s.peptide.label is None:
                raise ValueError(f"peptide {s.peptide.id!r} has no label")
            fwd = self.forward(s)
            cls_terms.append(bce(fwd.prob, s.peptide.label))
            a, b = self.contrastive_pair(fwd)
            zs.append(a)
            zt.append(b)
        cls = nk.scale(nk.sum_all(nk.concat_rows(cls_terms)), 1.0 / len(batch))
        con = info_nce(zs, zt, loss.tau) if len(batch) >= 2 else None
        return hybrid(cls, con, loss.lam)

    def predict_proba(self, samples: Sequence[Sample]) -> np.ndarray:
        return np.array([self.forward(s).prob.item() for s in samples])

    def named_shapes(self) -> Iterator[tuple[str, tuple[int, int]]]:
        for name, node in self.parameters().items():
            yield name, node.shape
