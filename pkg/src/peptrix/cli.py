"""Command-line entry point: ``peptrix {train,eval,explain,embed,synth}``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 training
failure. Failures print one ``error=<kind> code=<n> message="..."`` line on
standard error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import subprocess
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from .encoders import FileProvider, TableProvider, residue_indices
from .explain import HeatmapSpec, export_attention_csv, read_attention_csv, render_heatmap_svg, top_residues
from .ioformats import (
    CoordSet,
    EmbeddingFile,
    FormatError,
    Peptide,
    parse_dataset_csv,
    parse_fasta,
    parse_pdb_ca,
    read_embeddings,
    write_embeddings,
)
from .model import ModelConfig, PeptideClassifier
from .synthetic import write_fixture
from .trainer import (
    DataError,
    TrainConfig,
    build_samples,
    evaluate,
    format_history,
    load_model,
    save_model,
    train,
)

log = logging.getLogger("peptrix")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAIN = 0, 1, 2, 3

MODEL_FILE = "model.ptrixmdl"
HISTORY_FILE = "history.csv"
MANIFEST_FILE = "manifest.json"


class CliError(Exception):
    kind = "config"
    code = EXIT_CONFIG


class ConfigError(CliError):
    pass


class InputError(CliError):
    kind = "data"
    code = EXIT_DATA


class TrainingError(CliError):
    kind = "training"
    code = EXIT_TRAIN


@dataclass
class RunConfig:
    train_csv: str = ""
    test_csv: str = ""
    pdb_dir: str = ""
    embeddings: str = ""
    out: str = "run"
    provider: str = "table"
    dim: int = 64
    heads: int = 1
    threshold: float = 8.0
    contrastive_source: str = "encoder"
    batch_size: int = 32
    max_epochs: int = 10
    patience: int = 3  # 0 disables early stopping
    lr0: float = 1e-3
    gamma: float = 0.9
    weight_decay: float = 1e-2
    lam: float = 0.5
    tau: float = 0.07
    seed: int = 42
    val_fraction: float = 0.1

    # config-file spelling -> field name
    ALIASES = {"lambda": "lam"}
    PATH_FIELDS = ("train_csv", "test_csv", "pdb_dir", "embeddings", "out")

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "RunConfig":
        path = Path(path)
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        cfg = cls()
        cfg.update(raw, base=path.parent)
        return cfg

    def update(self, values: dict, base: Path | None = None) -> None:
        types = {f.name: f.type for f in fields(self)}
        for key, value in values.items():
            name = self.ALIASES.get(key, key)
            if name not in types:
                raise ConfigError(f"unknown config key {key!r}")
            if isinstance(value, dict):
                raise ConfigError(f"config must be flat; {key!r} is a table")
            expected = types[name]
            try:
                if expected == "int":
                    if isinstance(value, bool) or not isinstance(value, int):
                        raise TypeError
                elif expected == "float":
                    if isinstance(value, bool) or not isinstance(value, (int, float)):
                        raise TypeError
                    value = float(value)
                elif not isinstance(value, str):
                    raise TypeError
            except TypeError:
                raise ConfigError(f"config key {key!r} expects {expected}, got {value!r}") from None
            if name in self.PATH_FIELDS and value and base is not None and not os.path.isabs(value):
                value = str(base / value)
            setattr(self, name, value)

    def model_config(self) -> ModelConfig:
        try:
            return ModelConfig(
                dim=self.dim, heads=self.heads, threshold=self.threshold,
                provider=self.provider, contrastive_source=self.contrastive_source,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(
                batch_size=self.batch_size, max_epochs=self.max_epochs,
                patience=self.patience or None, lr0=self.lr0, gamma=self.gamma,
                weight_decay=self.weight_decay, lam=self.lam, tau=self.tau,
                seed=self.seed, val_fraction=self.val_fraction,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["lambda"] = out.pop("lam")
        return out


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit 2, which means "data error" here
        raise ConfigError(message)


def _read_text(path: str | os.PathLike, what: str) -> str:
    if not path:
        raise ConfigError(f"{what} is not configured")
    try:
        return Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise InputError(f"{what} not found: {path}") from None
    except (OSError, UnicodeDecodeError) as exc:
        raise InputError(f"cannot read {what} {path}: {exc}") from None


def load_peptides(path: str) -> list[Peptide]:
    text = _read_text(path, "dataset")
    try:
        if path.endswith((".fa", ".fasta", ".faa")) or text.lstrip().startswith(">"):
            peptides = parse_fasta(text)
        else:
            peptides = parse_dataset_csv(text)
    except FormatError as exc:
        raise InputError(f"{path}: {exc}") from None
    if not peptides:
        raise InputError(f"{path}: no peptides")
    return peptides


def load_coords(peptides: Sequence[Peptide], pdb_dir: str) -> dict[str, CoordSet]:
    if not pdb_dir:
        raise ConfigError("pdb_dir is not configured")
    if not os.path.isdir(pdb_dir):
        raise InputError(f"structure directory not found: {pdb_dir}")
    coords = {}
    for p in peptides:
        path = os.path.join(pdb_dir, f"{p.id}.pdb")
        text = _read_text(path, f"structure for {p.id!r}")
        try:
            coords[p.id] = parse_pdb_ca(text, p.id)
            coords[p.id].check_matches(p)
        except FormatError as exc:
            raise InputError(f"{path}: {exc}") from None
    return coords


def load_cache(path: str) -> EmbeddingFile:
    if not path:
        raise ConfigError("file provider needs an embeddings path")
    try:
        return read_embeddings(path)
    except FileNotFoundError:
        raise InputError(f"embedding cache not found: {path}") from None
    except FormatError as exc:
        raise InputError(f"{path}: {exc}") from None


def git_describe() -> str:
    try:
        res = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            capture_output=True, text=True, timeout=10,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return res.stdout.strip() or "unknown"


def cmd_train(args: argparse.Namespace) -> int:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {
        k: v for k, v in (
            ("seed", args.seed), ("lambda", args.lam), ("tau", args.tau), ("dim", args.dim),
            ("threshold", args.threshold), ("heads", args.heads), ("provider", args.provider),
            ("out", args.out), ("max_epochs", args.epochs),
        ) if v is not None
    }
    cfg.update(overrides)
    model_cfg, train_cfg = cfg.model_config(), cfg.train_config()

    peptides = load_peptides(cfg.train_csv)
    if any(p.label is None for p in peptides):
        raise InputError(f"{cfg.train_csv}: every training peptide needs a label")
    coords = load_coords(peptides, cfg.pdb_dir)
    cache = load_cache(cfg.embeddings) if cfg.provider == "file" else None
    if cache is not None:
        for p in peptides:
            if p.id not in cache.entries:
                raise InputError(f"{cfg.embeddings}: no embedding for peptide {p.id!r}")
            if cache.entries[p.id].shape[0] != len(p):
                raise InputError(f"{cfg.embeddings}: embedding for {p.id!r} does not match its length")

    model = PeptideClassifier(model_cfg, seed=cfg.seed, cache=cache)
    try:
        result = train(peptides, coords, model, train_cfg)
    except DataError as exc:
        raise InputError(str(exc)) from None
    except (ArithmeticError, RuntimeError, ValueError) as exc:
        raise TrainingError(f"{type(exc).__name__}: {exc}") from None

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(out / MODEL_FILE, result.model, {"seed": cfg.seed, "best_epoch": result.best_epoch})
    (out / HISTORY_FILE).write_text(format_history(result.history))
    manifest = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "git_describe": git_describe(),
        "peptrix_version": __version__,
        "best_epoch": result.best_epoch,
        "epochs_run": len(result.history),
    }
    (out / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"trained {len(result.history)} epochs (best {result.best_epoch}); wrote {out}")
    return EXIT_OK


def _resolve_data_args(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    for name in ("pdb_dir", "embeddings"):
        value = getattr(args, name, None)
        if value:
            setattr(cfg, name, value)
    return cfg


def _load_model(path: str, embeddings: str) -> PeptideClassifier:
    if not os.path.exists(path):
        raise InputError(f"model snapshot not found: {path}")
    try:
        from .trainer import load_snapshot

        _, meta = load_snapshot(path)
        provider = meta.get("model", {}).get("provider", "table")
        cache = load_cache(embeddings) if provider == "file" else None
        return load_model(path, cache)
    except FormatError as exc:
        raise InputError(f"{path}: {exc}") from None


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _resolve_data_args(args)
    test_path = args.test or cfg.test_csv
    model = _load_model(args.model, cfg.embeddings)
    peptides = load_peptides(test_path)
    coords = load_coords(peptides, cfg.pdb_dir)
    try:
        samples = build_samples(peptides, coords, model)
        report = evaluate(model, samples)
    except (DataError, FormatError, KeyError) as exc:
        raise InputError(str(exc)) from None
    print(report.table())
    print(json.dumps(report.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_explain(args: argparse.Namespace) -> int:
    cfg = _resolve_data_args(args)
    data_path = args.data or cfg.test_csv or cfg.train_csv
    model = _load_model(args.model, cfg.embeddings)
    peptides = {p.id: p for p in load_peptides(data_path)}
    if args.id not in peptides:
        raise InputError(f"unknown peptide id {args.id!r} in {data_path}")
    peptide = peptides[args.id]
    coords = load_coords([peptide], cfg.pdb_dir)
    try:
        fwd = model.forward(model.sample(peptide, coords[peptide.id]))
    except (FormatError, KeyError) as exc:
        raise InputError(str(exc)) from None

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    for amap in fwd.maps:
        stem = f"{peptide.id}_attention_{amap.query}_to_{amap.key}"
        csv_path, svg_path = out / f"{stem}.csv", out / f"{stem}.svg"
        export_attention_csv(amap, csv_path)
        render_heatmap_svg(HeatmapSpec(amap, title=f"{peptide.id} {amap.query} -> {amap.key}"), svg_path)
        written[(amap.query, amap.key)] = csv_path
    # rank from the exported table so the report agrees with the CSV
    exported = read_attention_csv(written[("seq", "struct")])
    k = min(args.top, exported.shape[1])
    ranking = top_residues(exported, k)
    lines = [f"peptide {peptide.id} ({peptide.residues}) p(class 1) = {fwd.prob.item():.6f}",
             f"top {k} structural residues by attention received (seq -> struct):"]
    lines += [f"{rank:>3d}  {label:<6s} {score:.6f}" for rank, (label, score) in enumerate(ranking, start=1)]
    report = "\n".join(lines) + "\n"
    (out / f"{peptide.id}_top_residues.txt").write_text(report)
    sys.stdout.write(report)
    return EXIT_OK


def cmd_embed(args: argparse.Namespace) -> int:
    peptides = load_peptides(args.input)
    if args.model:
        model = _load_model(args.model, args.embeddings or "")
        provider = model.provider
        dim = model.config.dim
    else:
        dim = args.dim
        if dim < 1:
            raise ConfigError(f"dim must be positive, got {dim}")
        provider = TableProvider(dim, np.random.default_rng(args.seed))
    emb = EmbeddingFile(dim=dim)
    for p in peptides:
        try:
            emb.add(p.id, provider.encode(p).value)
        except (KeyError, FormatError) as exc:
            raise InputError(str(exc)) from None
    try:
        write_embeddings(emb, args.out)
    except OSError as exc:
        raise InputError(f"cannot write {args.out}: {exc}") from None
    print(f"wrote {len(emb.entries)} embeddings of dim {dim} to {args.out}")
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = write_fixture(args.out, n=args.n, length=args.length, seed=args.seed)
    print(f"wrote planted-motif fixture; config at {cfg}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="peptrix", description="Multimodal peptide classifier")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model from a key=value config")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--dim", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--heads", type=int)
    p.add_argument("--provider", choices=("table", "file"))
    p.add_argument("--epochs", type=int, help="override max_epochs")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a snapshot on labelled data")
    p.add_argument("--model", required=True)
    p.add_argument("--test")
    p.add_argument("--config")
    p.add_argument("--pdb-dir", dest="pdb_dir")
    p.add_argument("--embeddings")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="export attention maps for one peptide")
    p.add_argument("--model", required=True)
    p.add_argument("--id", required=True)
    p.add_argument("--data")
    p.add_argument("--config")
    p.add_argument("--pdb-dir", dest="pdb_dir")
    p.add_argument("--embeddings")
    p.add_argument("--top", type=int, default=10)
    p.add_argument("--out", default="explain")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("embed", help="write per-residue embeddings to a PTRIXEMB cache")
    p.add_argument("input", help="FASTA or dataset CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--model")
    p.add_argument("--embeddings", help="source cache when re-projecting through a file-provider model")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("synth", help="write a planted-motif fixture directory")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--length", type=int, default=20)
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(func=cmd_synth)
    return parser


def _configure_logging() -> None:
    level = os.environ.get("PEPTRIX_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ConfigError(f"PEPTRIX_LOG must be one of {sorted(levels)}, got {level!r}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv: Sequence[str] | None = None) -> int:
    try:
        _configure_logging()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except CliError as exc:
        print(f"error={exc.kind} code={exc.code} message={json.dumps(str(exc))}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
