"""Readers and writers for FASTA, PDB (CA records), dataset CSV and the
PTRIXEMB per-residue embedding cache."""

from __future__ import annotations

import csv
import io
import math
import os
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable

import numpy as np

AMINO_ACIDS = "ACDEFGHIKLMNPQRSTVWY"
ALPHABET = AMINO_ACIDS + "X"
# ambiguity / non-canonical IUPAC letters, read as unknown
EXTENDED = "BJOUZ"
_NORMALIZE = str.maketrans(EXTENDED, "X" * len(EXTENDED))
MIN_LENGTH = 2
MAX_LENGTH = 512

EMB_MAGIC = b"PTRIXEMB"
EMB_VERSION = 1


class FormatError(ValueError):
    """Input text or bytes do not follow the expected format."""

    def __init__(self, message: str, line: int | None = None) -> None:
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class Peptide:
    id: str
    residues: str
    label: int | None = None

    def __post_init__(self) -> None:
        if not MIN_LENGTH <= len(self.residues) <= MAX_LENGTH:
            raise FormatError(
                f"peptide {self.id!r} has length {len(self.residues)}, "
                f"expected {MIN_LENGTH}-{MAX_LENGTH}"
            )
        bad = set(self.residues) - set(ALPHABET)
        if bad:
            raise FormatError(f"peptide {self.id!r} has illegal residues {sorted(bad)}")
        if self.label not in (None, 0, 1):
            raise FormatError(f"peptide {self.id!r} has label {self.label!r}, expected 0 or 1")

    def __len__(self) -> int:
        return len(self.residues)


@dataclass(frozen=True)
class CoordSet:
    peptide_id: str
    ca_coords: np.ndarray  # n x 3, Angstrom

    def __post_init__(self) -> None:
        arr = np.asarray(self.ca_coords, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 3 or arr.shape[0] == 0:
            raise FormatError(f"coordinates for {self.peptide_id!r} must be n x 3, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"coordinates for {self.peptide_id!r} contain non-finite values")
        object.__setattr__(self, "ca_coords", arr)

    def __len__(self) -> int:
        return self.ca_coords.shape[0]

    def check_matches(self, peptide: Peptide) -> None:
        if len(self) != len(peptide):
            raise FormatError(
                f"{peptide.id!r}: {len(self)} CA coordinates for {len(peptide)} residues"
            )


@dataclass
class EmbeddingFile:
    dim: int
    entries: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = EMB_VERSION

    def add(self, peptide_id: str, rows: np.ndarray) -> None:
        rows = np.asarray(rows)
        if rows.ndim != 2 or rows.shape[1] != self.dim:
            raise FormatError(f"entry {peptide_id!r} has shape {rows.shape}, expected n x {self.dim}")
        self.entries[peptide_id] = rows.astype("<f4")


def _text(data: str | bytes) -> str:
    if isinstance(data, bytes):
        try:
            return data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"input is not UTF-8: {exc}") from exc
    return data


def parse_fasta(data: str | bytes) -> list[Peptide]:
    """Parse FASTA text into peptides, in input order.

    Sequence lines are concatenated and upper-cased; B, J, O, U and Z are
    read as X. The id is the first whitespace-delimited token of the header.
    """
    records: list[tuple[str, int, list[tuple[int, str]]]] = []
    for lineno, raw in enumerate(_text(data).splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith(";"):
            continue
        if line.startswith(">"):
            header = line[1:].split()
            if not header:
                raise FormatError("header without an id", lineno)
            records.append((header[0], lineno, []))
            continue
        if not records:
            raise FormatError("sequence data before the first header", lineno)
        records[-1][2].append((lineno, "".join(line.split()).upper().translate(_NORMALIZE)))

    peptides = []
    seen: set[str] = set()
    for pid, header_line, chunks in records:
        if pid in seen:
            raise FormatError(f"duplicate id {pid!r}", header_line)
        seen.add(pid)
        if not chunks:
            raise FormatError(f"empty record {pid!r}", header_line)
        for lineno, chunk in chunks:
            for ch in chunk:
                if ch not in ALPHABET:
                    raise FormatError(f"illegal residue {ch!r} in {pid!r}", lineno)
        residues = "".join(c for _, c in chunks)
        try:
            peptides.append(Peptide(pid, residues))
        except FormatError as exc:
            raise FormatError(str(exc), header_line) from None
    return peptides


def format_fasta(peptides: Iterable[Peptide], width: int = 60) -> str:
    out = []
    for p in peptides:
        out.append(f">{p.id}")
        out.extend(p.residues[i:i + width] for i in range(0, len(p.residues), width))
    return "\n".join(out) + "\n"


def parse_pdb_ca(data: str | bytes, peptide_id: str = "") -> CoordSet:
    """Extract CA coordinates from fixed-width ATOM records.

    Only the first model is read. Alternate locations other than blank or
    'A' are skipped; a repeated CA for the same residue keeps the first.
    Residues are ordered by (sequence number, insertion code), which must
    increase down the file.
    """
    coords: list[tuple[float, float, float]] = []
    last: tuple[int, str] | None = None
    for index, line in enumerate(_text(data).splitlines(), start=1):
        record = line[:6]
        if record.startswith("ENDMDL"):
            break
        if record != "ATOM  ":
            continue
        if line[12:16].strip() != "CA":
            continue
        if line[16:17] not in (" ", "A", ""):
            continue
        try:
            key = (int(line[22:26]), line[26:27].strip())
        except ValueError:
            raise FormatError(f"record {index}: unparseable residue number {line[22:26]!r}", index) from None
        try:
            xyz = (float(line[30:38]), float(line[38:46]), float(line[46:54]))
        except ValueError:
            raise FormatError(f"record {index}: unparseable coordinate field {line[30:54]!r}", index) from None
        if not all(math.isfinite(v) for v in xyz):
            raise FormatError(f"record {index}: non-finite coordinate", index)
        if last is not None and key <= last:
            if key == last:
                continue
            raise FormatError(
                f"record {index}: residue {key[0]}{key[1]} after {last[0]}{last[1]} (non-monotonic)", index
            )
        last = key
        coords.append(xyz)
    if not coords:
        raise FormatError("zero CA atoms")
    return CoordSet(peptide_id, np.array(coords))


_THREE = {
    "A": "ALA", "C": "CYS", "D": "ASP", "E": "GLU", "F": "PHE", "G": "GLY", "H": "HIS",
    "I": "ILE", "K": "LYS", "L": "LEU", "M": "MET", "N": "ASN", "P": "PRO", "Q": "GLN",
    "R": "ARG", "S": "SER", "T": "THR", "V": "VAL", "W": "TRP", "Y": "TYR", "X": "UNK",
}


def format_pdb_ca(peptide: Peptide, coords: CoordSet) -> str:
    """Write a CA-only PDB file in the standard column layout."""
    coords.check_matches(peptide)
    lines = []
    for i, (res, (x, y, z)) in enumerate(zip(peptide.residues, coords.ca_coords), start=1):
        lines.append(
            f"ATOM  {i:5d}  CA  {_THREE[res]} A{i:4d}    {x:8.3f}{y:8.3f}{z:8.3f}  1.00  0.00           C"
        )
    lines.append("END")
    return "\n".join(lines) + "\n"


def parse_dataset_csv(data: str | bytes) -> list[Peptide]:
    """Read an ``id,sequence,label`` table; the header row is required."""
    reader = csv.reader(io.StringIO(_text(data)))
    try:
        header = [h.strip().lower() for h in next(reader)]
    except StopIteration:
        raise FormatError("empty dataset file") from None
    try:
        col_id, col_seq = header.index("id"), header.index("sequence")
    except ValueError:
        raise FormatError(f"header must contain id and sequence columns, got {header}", 1) from None
    col_label = header.index("label") if "label" in header else None

    peptides = []
    seen: set[str] = set()
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise FormatError(f"expected {len(header)} fields, got {len(row)}", lineno)
        pid = row[col_id].strip()
        if not pid:
            raise FormatError("empty id", lineno)
        if pid in seen:
            raise FormatError(f"duplicate id {pid!r}", lineno)
        seen.add(pid)
        label = None
        if col_label is not None:
            text = row[col_label].strip()
            if text not in ("0", "1"):
                raise FormatError(f"label {text!r} outside {{0,1}}", lineno)
            label = int(text)
        try:
            peptides.append(Peptide(pid, row[col_seq].strip().upper().translate(_NORMALIZE), label))
        except FormatError as exc:
            raise FormatError(str(exc), lineno) from None
    return peptides


def format_dataset_csv(peptides: Iterable[Peptide]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "sequence", "label"])
    for p in peptides:
        writer.writerow([p.id, p.residues, "" if p.label is None else p.label])
    return buf.getvalue()


# PTRIXEMB layout, all little-endian:
#   magic[8] version:u32 dim:u32 count:u32
#   count x { id_len:u32 id:utf8[id_len] rows:u32 payload:f32[rows*dim] }

def write_embeddings(emb: EmbeddingFile, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<III", emb.version, emb.dim, len(emb.entries)))
        for pid, rows in emb.entries.items():
            rows = np.ascontiguousarray(rows, dtype="<f4")
            if rows.ndim != 2 or rows.shape[1] != emb.dim:
                raise FormatError(f"entry {pid!r} has shape {rows.shape}, expected n x {emb.dim}")
            key = pid.encode("utf-8")
            fh.write(struct.pack("<I", len(key)))
            fh.write(key)
            fh.write(struct.pack("<I", rows.shape[0]))
            fh.write(rows.tobytes())


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file while reading {what}")
    return data


def read_embeddings(path: str | os.PathLike) -> EmbeddingFile:
    with open(path, "rb") as fh:
        magic = fh.read(len(EMB_MAGIC))
        if magic != EMB_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {EMB_MAGIC!r}")
        version, dim, count = struct.unpack("<III", _read_exact(fh, 12, "header"))
        if version != EMB_VERSION:
            raise FormatError(f"unsupported embedding file version {version}")
        if dim == 0:
            raise FormatError("embedding dim is zero")
        emb = EmbeddingFile(dim=dim, version=version)
        for _ in range(count):
            (klen,) = struct.unpack("<I", _read_exact(fh, 4, "id length"))
            pid = _read_exact(fh, klen, "id").decode("utf-8")
            (rows,) = struct.unpack("<I", _read_exact(fh, 4, "row count"))
            payload = _read_exact(fh, 4 * rows * dim, f"payload of {pid!r}")
            if pid in emb.entries:
                raise FormatError(f"duplicate entry {pid!r}")
            emb.entries[pid] = np.frombuffer(payload, dtype="<f4").reshape(rows, dim).copy()
        if fh.read(1):
            raise FormatError("trailing bytes after last entry")
    return emb
