"""FASTA ingestion, length policy and deterministic batching."""

from __future__ import annotations

import gzip
import io
import os
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Iterator, Sequence

import numpy as np


class DataError(ValueError):
    pass


class MalformedFasta(DataError):
    def __init__(self, line_number: int, msg: str = "sequence data before any header"):
        super().__init__(f"line {line_number}: {msg}")
        self.line_number = line_number


class EmptySequence(DataError):
    def __init__(self, record_id: str):
        super().__init__(f"record {record_id!r} has no residues")
        self.record_id = record_id


@dataclass(frozen=True)
class SequenceRecord:
    id: str
    residues: str

    @property
    def length(self) -> int:
        return len(self.residues)


@dataclass(frozen=True)
class BatchPlan:
    seed: int = 0
    batch_size: int = 8
    max_length: int = 512
    epoch: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_length < 2:
            raise ValueError("max_length must be >= 2")


def open_fasta(path: str | os.PathLike) -> BinaryIO:
    path = os.fspath(path)
    if path.endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def parse_fasta(stream: BinaryIO | Iterable[bytes]) -> Iterator[SequenceRecord]:
    """Stream records from FASTA bytes; memory is bounded by the longest record."""
    header = None
    chunks: list[str] = []
    for lineno, raw in enumerate(stream, start=1):
        line = raw.decode("utf-8").strip()
        if not line:
            continue
        if line.startswith(">"):
            if header is not None:
                yield _finish(header, chunks)
            header = line[1:].strip()
            chunks = []
        elif header is None:
            raise MalformedFasta(lineno)
        else:
            chunks.append("".join(line.split()).upper())
    if header is not None:
        yield _finish(header, chunks)


def _finish(header: str, chunks: list[str]) -> SequenceRecord:
    residues = "".join(chunks)
    if not residues:
        raise EmptySequence(header)
    return SequenceRecord(header, residues)


def parse_fasta_text(text: str) -> list[SequenceRecord]:
    return list(parse_fasta(io.BytesIO(text.encode())))


def read_fasta(path: str | os.PathLike) -> Iterator[SequenceRecord]:
    with open_fasta(path) as fh:
        yield from parse_fasta(fh)


def write_fasta(records: Iterable[SequenceRecord], fh: BinaryIO, width: int = 60) -> None:
    for rec in records:
        fh.write(f">{rec.id}\n".encode())
        for i in range(0, len(rec.residues), width):
            fh.write(rec.residues[i:i + width].encode() + b"\n")


def crop_to_max(record: SequenceRecord | str, max_length: int, rng: np.random.Generator) -> str:
    """Return the residues, or a uniformly placed window of ``max_length`` if longer."""
    if max_length < 2:
        raise ValueError("max_length must be >= 2")
    residues = record.residues if isinstance(record, SequenceRecord) else record
    if len(residues) <= max_length:
        return residues
    start = int(rng.integers(0, len(residues) - max_length + 1))
    return residues[start:start + max_length]


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    """Philox-keyed permutation of ``range(n)``; depends only on ``(seed, epoch)``."""
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, epoch & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key)).permutation(n)


def shuffle_and_batch(records: Sequence, plan: BatchPlan) -> Iterator[list]:
    """Fixed-size batches in a seeded order; the remainder is dropped."""
    perm = epoch_permutation(len(records), plan.seed, plan.epoch)
    for b in range(len(records) // plan.batch_size):
        yield [records[i] for i in perm[b * plan.batch_size:(b + 1) * plan.batch_size]]


def crop_rng(seed: int, epoch: int, record_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, 2, epoch, record_index])


def batch_for_step(records: Sequence[SequenceRecord], plan: BatchPlan, step: int) -> list[tuple[int, str]]:
    """``(record_index, cropped residues)`` pairs for a 0-based global step.

    Epochs advance every ``len(records) // batch_size`` steps; each record's
    crop window is keyed on ``(seed, epoch, record_index)``.
    """
    per_epoch = len(records) // plan.batch_size
    if per_epoch == 0:
        raise DataError(f"corpus of {len(records)} records smaller than batch size {plan.batch_size}")
    epoch, b = divmod(step, per_epoch)
    perm = epoch_permutation(len(records), plan.seed, epoch)
    idx = perm[b * plan.batch_size:(b + 1) * plan.batch_size]
    return [(int(i), crop_to_max(records[i], plan.max_length, crop_rng(plan.seed, epoch, int(i))))
            for i in idx]


def load_corpus(path: str | os.PathLike, min_length: int = 2) -> list[SequenceRecord]:
    """All records of at least ``min_length`` residues."""
    return [r for r in read_fasta(path) if r.length >= min_length]
