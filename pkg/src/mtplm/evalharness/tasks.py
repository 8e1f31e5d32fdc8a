"""Task files, embedding extraction and multi-seed evaluation runs."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Any, Iterable, Sequence

import numpy as np
import torch

from .. import model, vocab
from . import metrics
from .head import SEQUENCE_TASKS, TASK_KINDS, TOKEN_TASKS, HeadConfig, predict, train_head

DEFAULT_SEEDS = (7, 0, 42)
SS_ALPHABETS = {"ssp3": "HEC", "ssp8": "HGIEBTSC"}


class TaskFileError(ValueError):
    def __init__(self, line_number: int, msg: str):
        super().__init__(f"line {line_number}: {msg}")
        self.line_number = line_number


@dataclass
class EvalRecord:
    sequence: str
    labels: Any  # per-token class ids, scalar target, or contact map
    split: str = "train"


def _token_labels(raw, task: str, n: int) -> np.ndarray:
    if isinstance(raw, str):
        alphabet = SS_ALPHABETS[task]
        raw = [alphabet.index(c) if c in alphabet else (alphabet.index("C") if c == "-" else None) for c in raw]
        if None in raw:
            raise ValueError(f"label string has characters outside {SS_ALPHABETS[task]!r}")
    labels = np.asarray(raw, dtype=np.int64)
    if labels.shape != (n,):
        raise ValueError(f"{labels.size} labels for {n} residues")
    if ((labels < -1) | (labels >= TOKEN_TASKS[task])).any():
        raise ValueError(f"class id outside [0, {TOKEN_TASKS[task]})")
    return labels


def parse_record(obj: dict, task: str) -> EvalRecord:
    seq = obj["sequence"].upper()
    if not seq:
        raise ValueError("empty sequence")
    split = obj.get("split", "train")
    if task in TOKEN_TASKS:
        return EvalRecord(seq, _token_labels(obj["labels"], task, len(seq)), split)
    if task in SEQUENCE_TASKS:
        target = float(obj["target"])
        if not np.isfinite(target):
            raise ValueError("target is not finite")
        return EvalRecord(seq, target, split)
    coords = np.asarray(obj["ca_coords"], dtype=np.float64)
    if coords.shape != (len(seq), 3):
        raise ValueError(f"ca_coords shape {coords.shape} != ({len(seq)}, 3)")
    return EvalRecord(seq, metrics.contact_map_from_coords(coords), split)


def load_task_file(path: str | os.PathLike, task: str) -> list[EvalRecord]:
    if task not in TASK_KINDS:
        raise ValueError(f"unknown task kind {task!r}; valid: {', '.join(TASK_KINDS)}")
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(parse_record(json.loads(line), task))
            except (ValueError, KeyError, TypeError, metrics.MetricError) as exc:
                raise TaskFileError(lineno, f"{type(exc).__name__}: {exc}") from exc
    if not records:
        raise TaskFileError(0, "no records")
    return records


def extract_embeddings(params: model.Parameters, cfg: model.ModelConfig, sequences: Iterable[str],
                       prefix: str = "NLU") -> list[torch.Tensor]:
    """Final encoder states per residue; prefix and eos positions are dropped."""
    out = []
    for seq in sequences:
        ids = vocab.encode(seq, prefix)
        out.append(model.encode_only(params, cfg, ids)[1:-1].clone())
    return out


def score(task: str, head, embs: Sequence[torch.Tensor], records: Sequence[EvalRecord]) -> dict[str, float]:
    preds = [predict(head, e) for e in embs]
    if task in TOKEN_TASKS:
        pred = np.concatenate(preds)
        true = np.concatenate([r.labels for r in records])
        return {"accuracy": metrics.accuracy(pred, true)}
    if task in SEQUENCE_TASKS:
        return {"spearman": metrics.spearman([float(p) for p in preds], [r.labels for r in records])}
    at_l = [metrics.precision_at(p, r.labels, "L") for p, r in zip(preds, records)]
    at_l5 = [metrics.precision_at(p, r.labels, "L/5") for p, r in zip(preds, records)]
    return {"precision_at_L": float(np.mean(at_l)), "precision_at_L5": float(np.mean(at_l5))}


def evaluate_embeddings(embs: Sequence[torch.Tensor], records: Sequence[EvalRecord], task: str,
                        seeds: Sequence[int] = DEFAULT_SEEDS, head_cfg: HeadConfig | None = None,
                        ) -> dict[str, Any]:
    """Train one head per seed and summarize each metric as mean and sample std.

    Heads are fit on ``split == "train"`` records and scored on the
    ``"test"`` records, or on the training records when no test split exists.
    """
    head_cfg = head_cfg or HeadConfig(embedding_dim=embs[0].shape[-1])
    train_idx = [i for i, r in enumerate(records) if r.split == "train"]
    test_idx = [i for i, r in enumerate(records) if r.split == "test"] or train_idx
    if not train_idx:
        raise ValueError("no training records")
    per_seed: dict[str, dict[str, float]] = {}
    for seed in seeds:
        head = train_head([embs[i] for i in train_idx], [records[i].labels for i in train_idx],
                          task, head_cfg, seed)
        per_seed[str(seed)] = score(task, head, [embs[i] for i in test_idx], [records[i] for i in test_idx])
    summary = {}
    for name in next(iter(per_seed.values())):
        values = [per_seed[str(s)][name] for s in seeds]
        mean, std = metrics.mean_std(values)
        summary[name] = {"per_seed": values, "mean": mean, "std": std}
    return {"seeds": list(seeds), "per_seed": per_seed, "metrics": summary,
            "evaluated_on": "test" if test_idx is not train_idx else "train"}


def run_task(params: model.Parameters, cfg: model.ModelConfig, records: Sequence[EvalRecord], task: str,
             prefix: str, seeds: Sequence[int] = DEFAULT_SEEDS, dataset: str = "",
             head_cfg: HeadConfig | None = None) -> dict[str, Any]:
    embs = extract_embeddings(params, cfg, [r.sequence for r in records], prefix)
    result = evaluate_embeddings(embs, records, task, seeds, head_cfg)
    return {"task": task, "dataset": dataset, "prefix": prefix, **result}


def synthetic_ssp3(n_records: int, seed: int, min_len: int = 30, max_len: int = 60) -> list[dict]:
    """Random sequences whose 3-state label is a fixed function of the residue letter."""
    rng = np.random.default_rng(seed)
    letters = vocab.RESIDUES[:20]
    classes = {c: i % 3 for i, c in enumerate(letters)}
    out = []
    for _ in range(n_records):
        seq = "".join(rng.choice(list(letters), size=int(rng.integers(min_len, max_len + 1))))
        out.append({"sequence": seq, "labels": "".join("HEC"[classes[c]] for c in seq)})
    return out
