"""Pre-training example construction: span-corruption MLM and sequence completion."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels, vocab


class Task(str, enum.Enum):
    MLM = "mlm"
    COMPLETION = "completion"


class ObjectiveError(ValueError):
    pass


class SequenceTooShort(ObjectiveError):
    pass


class SentinelBudgetExceeded(ObjectiveError):
    pass


class MalformedExample(ObjectiveError):
    pass


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class ObjectiveConfig:
    masking_probabilities: tuple[float, ...] = (0.15, 0.20, 0.30)
    mean_span_length: float = 3.0
    mlm_assignment_probability: float = 0.5
    max_length: int = 512

    def __post_init__(self):
        if not self.masking_probabilities:
            raise ValueError("masking_probabilities must be non-empty")
        for p in self.masking_probabilities:
            if not 0.0 < p < 1.0:
                raise ValueError(f"masking probability {p} outside (0, 1)")
        if self.mean_span_length < 1:
            raise ValueError("mean_span_length must be >= 1")
        if not 0.0 <= self.mlm_assignment_probability <= 1.0:
            raise ValueError("mlm_assignment_probability outside [0, 1]")
        if self.max_length < 2:
            raise ValueError("max_length must be >= 2")
        worst = span_budget(self.max_length, max(self.masking_probabilities), self.mean_span_length)
        if worst[1] > vocab.NUM_SENTINELS:
            raise ValueError(
                f"{worst[1]} spans needed at max_length={self.max_length}; "
                f"only {vocab.NUM_SENTINELS} sentinels exist"
            )


@dataclass
class PretrainExample:
    task: Task
    encoder_ids: np.ndarray
    decoder_target_ids: np.ndarray
    source_length: int
    masking_probability_used: float | None = None
    spans: list[tuple[int, int]] = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        return {
            "task": self.task.value,
            "p": self.masking_probability_used,
            "encoder": self.encoder_ids.tolist(),
            "target": self.decoder_target_ids.tolist(),
        }


def sample_masking_probability(rng: np.random.Generator, cfg: ObjectiveConfig | None = None) -> float:
    probs = (cfg or ObjectiveConfig()).masking_probabilities
    return probs[int(rng.integers(len(probs)))]


def assign_task(rng: np.random.Generator, cfg: ObjectiveConfig | None = None) -> Task:
    cfg = cfg or ObjectiveConfig()
    return Task.MLM if rng.random() < cfg.mlm_assignment_probability else Task.COMPLETION


def span_budget(length: int, p: float, mean_span_length: float) -> tuple[int, int]:
    """Return ``(masked_tokens, n_spans)`` for a sequence of ``length`` tokens.

    Both are floored at one. The span count is capped so that every span has
    at least one token and consecutive spans are separated by at least one
    unmasked token.
    """
    n_mask = max(1, round_half_up(length * p))
    n_mask = min(n_mask, length)
    n_spans = max(1, round_half_up(length * p / mean_span_length))
    n_spans = min(n_spans, n_mask, length - n_mask + 1)
    return n_mask, n_spans


def _random_composition(rng, total: int, parts: int) -> np.ndarray:
    # uniform over compositions of `total` into `parts` positive integers
    if parts == 1:
        return np.array([total], dtype=np.int64)
    cuts = np.sort(rng.choice(total - 1, size=parts - 1, replace=False)) + 1
    return np.diff(np.concatenate(([0], cuts, [total]))).astype(np.int64)


def sample_spans(length: int, p: float, cfg: ObjectiveConfig, rng) -> list[tuple[int, int]]:
    """Place non-adjacent spans uniformly at random; returns ``(start, length)`` pairs."""
    n_mask, n_spans = span_budget(length, p, cfg.mean_span_length)
    if n_spans > vocab.NUM_SENTINELS:
        raise SentinelBudgetExceeded(f"{n_spans} spans > {vocab.NUM_SENTINELS} sentinels")
    span_lengths = _random_composition(rng, n_mask, n_spans)
    # n_spans + 1 gaps, interior ones at least 1: distribute the slack freely
    slack = length - n_mask - (n_spans - 1)
    gaps = _random_composition(rng, slack + n_spans + 1, n_spans + 1) - 1
    gaps[1:-1] += 1
    spans = []
    pos = 0
    for s in range(n_spans):
        pos += int(gaps[s])
        spans.append((pos, int(span_lengths[s])))
        pos += int(span_lengths[s])
    return spans


def apply_spans(residue_ids: Sequence[int], spans: Sequence[tuple[int, int]], p: float | None = None) -> PretrainExample:
    """Replace each ``(start, length)`` span by a fresh sentinel, in order."""
    ids = np.asarray(residue_ids, dtype=np.int64)
    if len(spans) > vocab.NUM_SENTINELS:
        raise SentinelBudgetExceeded(f"{len(spans)} spans > {vocab.NUM_SENTINELS} sentinels")
    prev_end = -1
    for start, n in spans:
        if n < 1 or start <= prev_end or start + n > len(ids):
            raise ObjectiveError(f"invalid span layout {list(spans)}")
        prev_end = start + n
    starts = np.fromiter((s for s, _ in spans), dtype=np.int64, count=len(spans))
    lengths = np.fromiter((n for _, n in spans), dtype=np.int64, count=len(spans))
    enc, tgt = kernels.apply_spans(ids, starts, lengths, vocab.NLU, vocab.EOS, vocab.SENTINEL_OFFSET)
    return PretrainExample(Task.MLM, enc, tgt, len(ids), p, list(spans))


def _check_residues(residue_ids: Sequence[int]) -> None:
    if len(residue_ids) < 2:
        raise SequenceTooShort(f"need at least 2 tokens, got {len(residue_ids)}")


def span_corrupt(residue_ids: Sequence[int], p: float, cfg: ObjectiveConfig, rng) -> PretrainExample:
    _check_residues(residue_ids)
    spans = sample_spans(len(residue_ids), p, cfg, rng)
    return apply_spans(residue_ids, spans, p)


def sequence_completion(residue_ids: Sequence[int]) -> PretrainExample:
    _check_residues(residue_ids)
    ids = np.asarray(residue_ids, dtype=np.int64)
    k = (len(ids) + 1) // 2
    enc = np.concatenate(([vocab.S2S], ids[:k], [vocab.EOS])).astype(np.int64)
    tgt = np.concatenate((ids[k:], [vocab.EOS])).astype(np.int64)
    return PretrainExample(Task.COMPLETION, enc, tgt, len(ids), None)


def make_example(residue_ids: Sequence[int], cfg: ObjectiveConfig, rng) -> PretrainExample:
    """Assign a task, then build the example for it."""
    task = assign_task(rng, cfg)
    if task is Task.MLM:
        p = sample_masking_probability(rng, cfg)
        return span_corrupt(residue_ids, p, cfg, rng)
    return sequence_completion(residue_ids)


def _strip(ids: np.ndarray, prefix: int) -> np.ndarray:
    if len(ids) < 2 or ids[0] != prefix or ids[-1] != vocab.EOS:
        raise MalformedExample("encoder ids must start with the task prefix and end with eos")
    return ids[1:-1]


def reconstruct(example: PretrainExample) -> np.ndarray:
    enc = np.asarray(example.encoder_ids, dtype=np.int64)
    tgt = np.asarray(example.decoder_target_ids, dtype=np.int64)
    if len(tgt) == 0 or tgt[-1] != vocab.EOS:
        raise MalformedExample("target must end with eos")
    if example.task is Task.COMPLETION:
        return np.concatenate((_strip(enc, vocab.S2S), tgt[:-1]))
    out = kernels.splice_spans(_strip(enc, vocab.NLU), tgt[:-1], vocab.SENTINEL_OFFSET, vocab.NUM_SENTINELS)
    if out is None:
        raise MalformedExample("sentinel order differs between encoder and target")
    return out
