"""Multi-task pre-training loop and checkpoint container."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import data, model, objectives, optim, vocab
from .objectives import ObjectiveConfig, PretrainExample, Task

log = logging.getLogger(__name__)

MAGIC = b"MTPLMCKP"
FORMAT_VERSION = 1
_DTYPES = {torch.float64: "<f8", torch.float32: "<f4"}
_TORCH_DTYPES = {"<f8": torch.float64, "<f4": torch.float32}


class NonFiniteLoss(FloatingPointError):
    pass


class CheckpointError(IOError):
    pass


class VersionMismatch(CheckpointError):
    pass


class ChecksumMismatch(CheckpointError):
    pass


@dataclass(frozen=True)
class RunConfig:
    model: model.ModelConfig = field(default_factory=model.ModelConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    schedule: optim.ScheduleConfig = field(default_factory=optim.ScheduleConfig)
    plan: data.BatchPlan = field(default_factory=data.BatchPlan)
    precision: str = "float64"

    def __post_init__(self):
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "float64" else torch.float32

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["objective"]["masking_probabilities"] = list(self.objective.masking_probabilities)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        obj = dict(d["objective"])
        obj["masking_probabilities"] = tuple(obj["masking_probabilities"])
        return cls(model.ModelConfig(**d["model"]), ObjectiveConfig(**obj),
                   optim.ScheduleConfig(**d["schedule"]), data.BatchPlan(**d["plan"]),
                   d["precision"])


@dataclass
class TrainState:
    params: model.Parameters
    opt_state: optim.AdafactorState
    step: int
    seed: int
    config: RunConfig

    @classmethod
    def initial(cls, config: RunConfig, seed: int | None = None) -> "TrainState":
        seed = config.plan.seed if seed is None else seed
        params = model.init_params(config.model, seed, config.dtype)
        return cls(params, optim.AdafactorState.zeros_like(params), 0, seed, config)


def example_rng(seed: int, step: int, position: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1, step, position])


def collate(examples: Sequence[PretrainExample]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Pad to ``(encoder_ids, decoder_inputs, targets)`` with pad id 0."""
    enc_len = max(len(e.encoder_ids) for e in examples)
    tgt_len = max(len(e.decoder_target_ids) for e in examples)
    enc = torch.full((len(examples), enc_len), vocab.PAD, dtype=torch.long)
    tgt = torch.full((len(examples), tgt_len), vocab.PAD, dtype=torch.long)
    for i, e in enumerate(examples):
        enc[i, :len(e.encoder_ids)] = torch.from_numpy(e.encoder_ids)
        tgt[i, :len(e.decoder_target_ids)] = torch.from_numpy(e.decoder_target_ids)
    return enc, model.shift_right(tgt), tgt


def build_examples(state: TrainState, batch: Sequence[str]) -> list[PretrainExample]:
    cfg = state.config.objective
    return [objectives.make_example(vocab.residues_to_ids(residues), cfg, example_rng(state.seed, state.step, i))
            for i, residues in enumerate(batch)]


def batch_loss(params: model.Parameters, cfg: model.ModelConfig,
               examples: Sequence[PretrainExample]) -> torch.Tensor:
    enc, dec_in, tgt = collate(examples)
    return model.loss(model.forward(params, cfg, enc, dec_in), tgt)


def train_step(state: TrainState, batch: Sequence[str | data.SequenceRecord],
               batch_ids: Sequence[str] | None = None) -> tuple[TrainState, float, dict]:
    """One optimizer step over a batch of residue strings.

    Returns the new state, the mean token loss and the task-mix counts.
    The input state is left untouched.
    """
    residues = [b.residues if isinstance(b, data.SequenceRecord) else b for b in batch]
    examples = build_examples(state, residues)
    mcfg = state.config.model
    params = {n: p.detach().clone().requires_grad_(True) for n, p in state.params.items()}
    value = batch_loss(params, mcfg, examples)
    if not torch.isfinite(value):
        ids = batch_ids or [str(i) for i in range(len(batch))]
        bad = [ids[i] for i, e in enumerate(examples)
               if not torch.isfinite(batch_loss(state.params, mcfg, [e]))]
        raise NonFiniteLoss(f"non-finite loss at step {state.step}; examples {bad or ids}")
    grads = torch.autograd.grad(value, list(params.values()))
    lr = optim.learning_rate(state.step + 1, state.config.schedule)
    new_params, new_opt = optim.adafactor_update(
        state.params, dict(zip(params.keys(), grads)), state.opt_state, lr)
    counts = {"task_mlm": sum(e.task is Task.MLM for e in examples),
              "task_s2s": sum(e.task is Task.COMPLETION for e in examples),
              "lr": lr}
    new_state = TrainState(new_params, new_opt, state.step + 1, state.seed, state.config)
    return new_state, float(value.detach()), counts


def log_entry(step: int, loss: float, counts: dict) -> dict:
    return {"step": step, "loss": loss, "task_mlm": counts["task_mlm"],
            "task_s2s": counts["task_s2s"], "lr": counts["lr"]}


def pretrain(config: RunConfig, corpus: str | os.PathLike | Sequence[data.SequenceRecord], num_steps: int,
             checkpoint_every: int = 0, out_dir: str | os.PathLike | None = None,
             resume: TrainState | str | os.PathLike | None = None,
             ) -> tuple[TrainState, list[dict]]:
    """Run until ``state.step == num_steps``; returns final state and the new log lines.

    With ``out_dir`` set, loss lines are appended to ``loss_log.jsonl`` and
    checkpoints written every ``checkpoint_every`` steps plus at the end.
    """
    records = data.load_corpus(corpus) if isinstance(corpus, (str, os.PathLike)) else list(corpus)
    if resume is None:
        state = TrainState.initial(config)
    elif isinstance(resume, TrainState):
        state = resume
    else:
        state = load(resume)
    if state.config != config:
        raise ValueError("resume checkpoint was written with a different configuration")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_fh = open(out / "loss_log.jsonl", "a", encoding="utf-8") if out is not None else None
    entries: list[dict] = []
    try:
        while state.step < num_steps:
            try:
                pairs = data.batch_for_step(records, config.plan, state.step)
            except data.DataError as exc:
                raise data.DataError(f"step {state.step}: {exc}") from exc
            state, value, counts = train_step(state, [r for _, r in pairs],
                                              [records[i].id for i, _ in pairs])
            entry = log_entry(state.step, value, counts)
            entries.append(entry)
            if log_fh is not None:
                log_fh.write(json.dumps(entry) + "\n")
            if state.step % 100 == 0:
                log.info("step %d loss %.5f lr %.3g", state.step, value, counts["lr"])
            if out is not None and checkpoint_every and state.step % checkpoint_every == 0:
                save(state, out / f"ckpt_{state.step:08d}.bin")
    finally:
        if log_fh is not None:
            log_fh.close()
    if out is not None:
        save(state, out / "final.bin")
    return state, entries


# -- checkpoint container -------------------------------------------------
#
# MAGIC | u32 version | u64 header length | header JSON | tensor payload | sha256(all previous bytes)


def _tensor_items(state: TrainState):
    for name, t in state.params.items():
        yield "param", name, "", t
    for name, slot in state.opt_state.slots.items():
        for key, t in slot.items():
            yield "opt", name, key, t


def save(state: TrainState, path: str | os.PathLike) -> None:
    index, payload, offset = [], [], 0
    for group, name, slot, t in _tensor_items(state):
        dt = _DTYPES[t.dtype]
        raw = t.detach().contiguous().numpy().astype(dt, copy=False).tobytes()
        index.append({"group": group, "name": name, "slot": slot, "dtype": dt,
                      "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    header = json.dumps({
        "config": state.config.to_dict(), "step": state.step, "opt_step": state.opt_state.step,
        "rng": {"seed": state.seed, "scheme": "numpy-seedsequence[seed,stream,step,position]"},
        "tensors": index,
    }, sort_keys=True).encode()
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + b"".join(payload)
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(body + hashlib.sha256(body).digest())
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> TrainState:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC or len(raw) < 8 + 12 + 32:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: checkpoint format version {version}, reader expects {FORMAT_VERSION}")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumMismatch(f"{path}: checksum mismatch")
    header = json.loads(body[20:20 + hlen])
    payload = memoryview(body)[20 + hlen:]
    params: model.Parameters = {}
    slots: dict[str, dict[str, torch.Tensor]] = {}
    for item in header["tensors"]:
        arr = np.frombuffer(payload[item["offset"]:item["offset"] + item["nbytes"]], dtype=item["dtype"])
        t = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True).reshape(item["shape"]))
        if item["group"] == "param":
            params[item["name"]] = t
        else:
            slots.setdefault(item["name"], {})[item["slot"]] = t
    return TrainState(params, optim.AdafactorState(slots, header["opt_step"]), header["step"],
                      header["rng"]["seed"], RunConfig.from_dict(header["config"]))


def states_equal(a: TrainState, b: TrainState) -> bool:
    """Bitwise equality of two states."""
    if (a.step, a.seed, a.config, a.opt_state.step) != (b.step, b.seed, b.config, b.opt_state.step):
        return False
    if a.params.keys() != b.params.keys() or a.opt_state.slots.keys() != b.opt_state.slots.keys():
        return False
    same = all(x.dtype == b.params[n].dtype and torch.equal(x, b.params[n]) for n, x in a.params.items())
    return same and all(
        s.keys() == b.opt_state.slots[n].keys()
        and all(torch.equal(t, b.opt_state.slots[n][k]) for k, t in s.items())
        for n, s in a.opt_state.slots.items())
