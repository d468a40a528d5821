"""Planted-motif benchmark: label 1 iff a motif occurs in the sequence.

Positives are laid out on an ideal alpha helix and negatives on an extended
strand, so both modalities carry the label.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .ioformats import AMINO_ACIDS, CoordSet, Peptide, format_dataset_csv, format_pdb_ca

MOTIF = "KLAK"

# ideal alpha helix: 100 deg per residue, 1.5 A rise, 2.3 A radius
HELIX_TWIST = np.deg2rad(100.0)
HELIX_RISE = 1.5
HELIX_RADIUS = 2.3
# extended strand: 3.3 A advance per residue with a +-0.95 A zigzag (CA-CA ~3.8 A)
STRAND_RISE = 3.3
STRAND_ZIGZAG = 0.95


def helix_coords(n: int) -> np.ndarray:
    t = np.arange(n)
    return np.column_stack(
        [HELIX_RADIUS * np.cos(t * HELIX_TWIST), HELIX_RADIUS * np.sin(t * HELIX_TWIST), HELIX_RISE * t]
    )


def strand_coords(n: int) -> np.ndarray:
    t = np.arange(n)
    return np.column_stack([STRAND_RISE * t, STRAND_ZIGZAG * (-1.0) ** t, np.zeros(n)])


def planted_motif_corpus(
    n: int = 500,
    length: int = 20,
    seed: int = 42,
    motif: str = MOTIF,
    positive_fraction: float = 0.5,
) -> tuple[list[Peptide], dict[str, CoordSet]]:
    rng = np.random.default_rng(seed)
    letters = np.array(list(AMINO_ACIDS))
    peptides, coords = [], {}
    n_pos = int(round(n * positive_fraction))
    labels = np.array([1] * n_pos + [0] * (n - n_pos))[rng.permutation(n)]
    for i, label in enumerate(labels):
        while True:
            seq = "".join(rng.choice(letters, size=length))
            if label:
                at = int(rng.integers(0, length - len(motif) + 1))
                seq = seq[:at] + motif + seq[at + len(motif):]
            if (motif in seq) == bool(label):
                break
        pid = f"syn{i:04d}"
        peptides.append(Peptide(pid, seq, int(label)))
        xyz = helix_coords(length) if label else strand_coords(length)
        coords[pid] = CoordSet(pid, xyz)
    return peptides, coords


def split_corpus(
    peptides: list[Peptide], test_fraction: float = 0.2, seed: int = 42
) -> tuple[list[Peptide], list[Peptide]]:
    """Stratified train/test split."""
    from .trainer import stratified_split

    keep, held = stratified_split(peptides, test_fraction, np.random.default_rng(seed))
    return [peptides[i] for i in keep], [peptides[i] for i in held]


def write_fixture(
    directory: str | os.PathLike,
    n: int = 64,
    length: int = 20,
    seed: int = 42,
    test_fraction: float = 0.25,
    config: dict | None = None,
) -> Path:
    """Write train/test CSVs, one PDB per peptide and a ``train.toml``.

    Returns the config path.
    """
    root = Path(directory)
    (root / "pdb").mkdir(parents=True, exist_ok=True)
    peptides, coords = planted_motif_corpus(n, length, seed)
    train, test = split_corpus(peptides, test_fraction, seed)
    (root / "train.csv").write_text(format_dataset_csv(train))
    (root / "test.csv").write_text(format_dataset_csv(test))
    for p in peptides:
        (root / "pdb" / f"{p.id}.pdb").write_text(format_pdb_ca(p, coords[p.id]))
    settings = {
        "train_csv": "train.csv",
        "test_csv": "test.csv",
        "pdb_dir": "pdb",
        "seed": seed,
    }
    settings.update(config or {})
    lines = []
    for key, value in settings.items():
        if isinstance(value, str):
            lines.append(f'{key} = "{value}"')
        elif isinstance(value, bool):
            lines.append(f"{key} = {str(value).lower()}")
        else:
            lines.append(f"{key} = {value}")
    cfg = root / "train.toml"
    cfg.write_text("\n".join(lines) + "\n")
    return cfg
