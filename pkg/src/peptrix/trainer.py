"""Mini-batch training with AdamW, an exponential learning-rate schedule and
early stopping; evaluation metrics; model snapshot and history files."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import numkit as nk
from .ioformats import CoordSet, EmbeddingFile, FormatError, Peptide
from .losses import DEFAULT_LAMBDA, DEFAULT_TAU, LossConfig
from .model import ModelConfig, PeptideClassifier, Sample

log = logging.getLogger(__name__)

IMPROVEMENT = 1e-6
MDL_MAGIC = b"PTRIXMDL"
MDL_VERSION = 1


class DataError(ValueError):
    """Training or evaluation data is missing or inconsistent."""


@dataclass
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 10
    patience: int | None = 3  # None disables early stopping
    lr0: float = 1e-3
    gamma: float = 0.9
    weight_decay: float = 1e-2
    lam: float = DEFAULT_LAMBDA
    tau: float = DEFAULT_TAU
    seed: int = 42
    val_fraction: float = 0.1

    def __post_init__(self) -> None:
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be at least 2, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be at least 1, got {self.max_epochs}")
        if self.patience is not None and self.patience < 1:
            raise ValueError(f"patience must be at least 1, got {self.patience}")
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.lr0 < 0:
            raise ValueError(f"lr0 must be non-negative, got {self.lr0}")
        if not 0 <= self.val_fraction < 1:
            raise ValueError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        LossConfig(self.tau, self.lam)

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.tau, self.lam)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """In-place Adam update followed by decoupled weight decay."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise nk.ShapeError(f"adamw_step: gradient {g.shape} vs parameter {p.shape} for {name}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p -= lr * weight_decay * p


def lr_at(epoch: int, lr0: float, gamma: float) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return lr0 * gamma ** epoch


def stratified_split(
    items: Sequence[Peptide], fraction: float, rng: np.random.Generator
) -> tuple[list[int], list[int]]:
    """Indices (keep, held_out) with roughly ``fraction`` of each label held out."""
    keep, held = [], []
    labels = sorted({p.label for p in items}, key=lambda x: (x is None, x))
    for label in labels:
        idx = np.array([i for i, p in enumerate(items) if p.label == label])
        idx = idx[rng.permutation(len(idx))]
        k = int(round(fraction * len(idx)))
        if fraction > 0 and len(idx) >= 2:
            k = min(max(k, 1), len(idx) - 1)
        held.extend(idx[:k].tolist())
        keep.extend(idx[k:].tolist())
    return sorted(keep), sorted(held)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_total: float
    train_cls: float
    train_con: float
    val_total: float


@dataclass
class TrainResult:
    model: PeptideClassifier
    history: list[EpochRecord]
    best_epoch: int
    best_state: dict[str, np.ndarray]


def build_samples(
    peptides: Sequence[Peptide], coords: Mapping[str, CoordSet], model: PeptideClassifier
) -> list[Sample]:
    samples = []
    for p in peptides:
        c = coords.get(p.id)
        if c is None:
            raise DataError(f"missing coordinates for peptide {p.id!r}")
        try:
            samples.append(model.sample(p, c))
        except FormatError as exc:
            raise DataError(str(exc)) from exc
    return samples


def _epoch_loss(model: PeptideClassifier, samples: Sequence[Sample], batch_size: int, loss) -> float:
    total, count = 0.0, 0
    for lo in range(0, len(samples), batch_size):
        batch = samples[lo:lo + batch_size]
        _, br = model.batch_loss(batch, loss)
        total += br.total * len(batch)
        count += len(batch)
    return total / count


def train(
    dataset: Sequence[Peptide],
    coords: Mapping[str, CoordSet],
    model: PeptideClassifier,
    config: TrainConfig,
    val_set: Sequence[Peptide] | None = None,
) -> TrainResult:
    """Fit ``model`` in place and restore the best-validation snapshot.

    Without an explicit ``val_set`` a stratified ``val_fraction`` of
    ``dataset`` is held out. With no validation data at all (fraction 0 and
    patience None) the final epoch's parameters are kept.
    """
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    split_rng, shuffle_rng = (np.random.default_rng(s) for s in seeds)
    if val_set is None and config.val_fraction > 0:
        keep, held = stratified_split(dataset, config.val_fraction, split_rng)
        train_pep = [dataset[i] for i in keep]
        val_pep = [dataset[i] for i in held]
    else:
        train_pep, val_pep = list(dataset), list(val_set or [])
    if not train_pep:
        raise DataError("empty training split")
    if not val_pep and config.patience is not None:
        raise DataError("empty validation split; early stopping needs validation data")
    train_s = build_samples(train_pep, coords, model)
    val_s = build_samples(val_pep, coords, model)

    params = model.parameters()
    values = {n: p.value for n, p in params.items()}
    state = AdamState()
    loss_cfg = config.loss
    history: list[EpochRecord] = []
    best_val, best_epoch, best_state = math.inf, 0, model.state()
    stale = 0

    for epoch in range(1, config.max_epochs + 1):
        lr = lr_at(epoch - 1, config.lr0, config.gamma)
        order = shuffle_rng.permutation(len(train_s))
        sums = np.zeros(3)
        n_seen = n_con = 0
        for lo in range(0, len(order), config.batch_size):
            batch = [train_s[i] for i in order[lo:lo + config.batch_size]]
            nk.zero_grad(params.values())
            total, br = model.batch_loss(batch, loss_cfg)
            nk.backward(total)
            adamw_step(values, {n: p.grad for n, p in params.items()}, state, lr, config.weight_decay)
            sums[0] += br.total * len(batch)
            sums[1] += br.classification * len(batch)
            n_seen += len(batch)
            if len(batch) >= 2:
                sums[2] += br.contrastive * len(batch)
                n_con += len(batch)
        val_total = _epoch_loss(model, val_s, config.batch_size, loss_cfg) if val_s else math.nan
        rec = EpochRecord(
            epoch, lr, float(sums[0] / n_seen), float(sums[1] / n_seen),
            float(sums[2] / n_con) if n_con else 0.0, float(val_total),
        )
        history.append(rec)
        log.info(
            "epoch %d lr %.3g train %.5f (cls %.5f con %.5f) val %.5f",
            epoch, lr, rec.train_total, rec.train_cls, rec.train_con, val_total,
        )
        if not val_s:
            best_epoch, best_state = epoch, model.state()
            continue
        if val_total < best_val - IMPROVEMENT:
            best_val, best_epoch, best_state = val_total, epoch, model.state()
            stale = 0
        else:
            stale += 1
            if config.patience is not None and stale >= config.patience:
                log.info("early stop after epoch %d (best epoch %d)", epoch, best_epoch)
                break

    model.load_weights(best_state)
    return TrainResult(model, history, best_epoch, best_state)


@dataclass
class MetricsReport:
    confusion: np.ndarray  # rows = true class, cols = predicted class
    precision: tuple[float, float]
    recall: tuple[float, float]
    f1: tuple[float, float]
    support: tuple[int, int]
    f1_weighted: float
    f1_macro: float

    def to_dict(self) -> dict:
        return {
            "precision_0": self.precision[0],
            "precision_1": self.precision[1],
            "recall_0": self.recall[0],
            "recall_1": self.recall[1],
            "f1_weighted": self.f1_weighted,
            "f1_macro": self.f1_macro,
            "support_0": self.support[0],
            "support_1": self.support[1],
        }

    def table(self) -> str:
        lines = [f"{'class':>7} {'precision':>10} {'recall':>10} {'f1':>10} {'support':>8}"]
        for c in (0, 1):
            lines.append(
                f"{c:>7d} {self.precision[c]:>10.4f} {self.recall[c]:>10.4f} {self.f1[c]:>10.4f} {self.support[c]:>8d}"
            )
        lines.append(f"{'weighted':>7} {'':>10} {'':>10} {self.f1_weighted:>10.4f} {sum(self.support):>8d}")
        lines.append(f"{'macro':>7} {'':>10} {'':>10} {self.f1_macro:>10.4f} {sum(self.support):>8d}")
        return "\n".join(lines)


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def metrics_from_predictions(y_true: Sequence[int], y_pred: Sequence[int]) -> MetricsReport:
    y_true = np.asarray(y_true, dtype=int)
    y_pred = np.asarray(y_pred, dtype=int)
    if y_true.size == 0:
        raise DataError("empty test set")
    if y_true.shape != y_pred.shape:
        raise ValueError("label and prediction counts differ")
    conf = np.zeros((2, 2), dtype=int)
    np.add.at(conf, (y_true, y_pred), 1)
    prec, rec, f1 = [], [], []
    for c in (0, 1):
        tp = conf[c, c]
        p = _ratio(tp, conf[:, c].sum())
        r = _ratio(tp, conf[c, :].sum())
        prec.append(p)
        rec.append(r)
        f1.append(_ratio(2 * p * r, p + r))
    support = (int(conf[0].sum()), int(conf[1].sum()))
    weighted = (support[0] * f1[0] + support[1] * f1[1]) / sum(support)
    return MetricsReport(conf, tuple(prec), tuple(rec), tuple(f1), support, weighted, (f1[0] + f1[1]) / 2)


def evaluate(model: PeptideClassifier, samples: Sequence[Sample], threshold: float = 0.5) -> MetricsReport:
    if not samples:
        raise DataError("empty test set")
    labels = [s.peptide.label for s in samples]
    if any(y is None for y in labels):
        raise DataError("every test peptide needs a label")
    pred = (model.predict_proba(samples) >= threshold).astype(int)
    return metrics_from_predictions(labels, pred)


HISTORY_FIELDS = ("epoch", "lr", "train_total", "train_cls", "train_con", "val_total")


def format_history(history: Sequence[EpochRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HISTORY_FIELDS)
    for r in history:
        writer.writerow([r.epoch] + [repr(float(getattr(r, f))) for f in HISTORY_FIELDS[1:]])
    return buf.getvalue()


def parse_history(text: str) -> list[EpochRecord]:
    rows = list(csv.DictReader(io.StringIO(text)))
    return [EpochRecord(int(r["epoch"]), *(float(r[f]) for f in HISTORY_FIELDS[1:])) for r in rows]


# PTRIXMDL layout, all little-endian:
#   magic[8] version:u32 meta_len:u32 meta:utf8-json[meta_len] count:u32
#   count x { name_len:u32 name:utf8 rows:u32 cols:u32 payload:f32[rows*cols] }

def save_snapshot(path: str | os.PathLike, weights: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MDL_MAGIC)
        fh.write(struct.pack("<II", MDL_VERSION, len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(weights)))
        for name in sorted(weights):
            arr = np.ascontiguousarray(weights[name], dtype="<f4")
            if arr.ndim != 2:
                raise ValueError(f"{name}: snapshot entries must be matrices")
            key = name.encode("utf-8")
            fh.write(struct.pack("<I", len(key)))
            fh.write(key)
            fh.write(struct.pack("<II", *arr.shape))
            fh.write(arr.tobytes())


def load_snapshot(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    def read(n: int, what: str) -> bytes:
        data = fh.read(n)
        if len(data) != n:
            raise FormatError(f"truncated snapshot while reading {what}")
        return data

    with open(path, "rb") as fh:
        magic = fh.read(len(MDL_MAGIC))
        if magic != MDL_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MDL_MAGIC!r}")
        version, meta_len = struct.unpack("<II", read(8, "header"))
        if version != MDL_VERSION:
            raise FormatError(f"unsupported snapshot version {version}")
        try:
            meta = json.loads(read(meta_len, "metadata").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"corrupt snapshot metadata: {exc}") from None
        (count,) = struct.unpack("<I", read(4, "entry count"))
        weights = {}
        for _ in range(count):
            (klen,) = struct.unpack("<I", read(4, "name length"))
            name = read(klen, "name").decode("utf-8")
            rows, cols = struct.unpack("<II", read(8, f"shape of {name}"))
            payload = read(4 * rows * cols, f"payload of {name}")
            weights[name] = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float64)
        if fh.read(1):
            raise FormatError("trailing bytes after last snapshot entry")
    return weights, meta


def save_model(path: str | os.PathLike, model: PeptideClassifier, extra: Mapping | None = None) -> None:
    meta = {"model": model.config.to_dict()}
    if extra:
        meta.update(extra)
    save_snapshot(path, model.state(), meta)


def load_model(path: str | os.PathLike, cache: EmbeddingFile | None = None) -> PeptideClassifier:
    weights, meta = load_snapshot(path)
    try:
        config = ModelConfig(**meta["model"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"snapshot metadata does not describe a model: {exc}") from None
    try:
        return PeptideClassifier(config, cache=cache, weights=weights)
    except ValueError as exc:
        raise FormatError(f"snapshot does not match model layout: {exc}") from None
