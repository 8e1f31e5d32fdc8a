"""Adafactor with factored second moments, and the rsqrt-decay schedule."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch

EPS1 = 1e-30
EPS2 = 1e-3  # only used by relative-step mode, which is not implemented
CLIP_THRESHOLD = 1.0
DECAY_EXPONENT = 0.8


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass(frozen=True)
class ScheduleConfig:
    base_learning_rate: float = 1e-2
    warmup_steps: int = 10_000

    def __post_init__(self):
        if self.base_learning_rate <= 0:
            raise ValueError("base_learning_rate must be positive")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def learning_rate(step: int, cfg: ScheduleConfig | None = None) -> float:
    """Constant through warmup, then proportional to ``1/sqrt(step)``."""
    cfg = cfg or ScheduleConfig()
    if step < 1:
        raise ValueError("step must be >= 1")
    return cfg.base_learning_rate * math.sqrt(cfg.warmup_steps) / math.sqrt(max(step, cfg.warmup_steps))


@dataclass
class AdafactorState:
    slots: dict[str, dict[str, torch.Tensor]] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, torch.Tensor]) -> "AdafactorState":
        slots = {}
        for name, p in params.items():
            if p.dim() >= 2:
                slots[name] = {"row": torch.zeros(p.shape[:-1], dtype=p.dtype),
                               "col": torch.zeros(p.shape[:-2] + p.shape[-1:], dtype=p.dtype)}
            else:
                slots[name] = {"v": torch.zeros(p.shape, dtype=p.dtype)}
        return cls(slots, 0)

    def clone(self) -> "AdafactorState":
        return AdafactorState({n: {k: t.clone() for k, t in s.items()} for n, s in self.slots.items()},
                              self.step)


def factored_second_moment(row: torch.Tensor, col: torch.Tensor) -> torch.Tensor:
    return (row.unsqueeze(-1) * col.unsqueeze(-2)) / row.mean(-1, keepdim=True).unsqueeze(-1)


def _rms(x: torch.Tensor) -> torch.Tensor:
    return x.pow(2).mean().sqrt()


@torch.no_grad()
def adafactor_update(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor],
                     state: AdafactorState, lr: float) -> tuple[dict[str, torch.Tensor], AdafactorState]:
    """One Adafactor step without momentum; returns new params and state.

    Inputs are not modified.
    """
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter {name} {tuple(params[name].shape)}")
        if not torch.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient for {name}")
    t = state.step + 1
    beta2 = 1.0 - t ** (-DECAY_EXPONENT)
    new_params, new_slots = {}, {}
    for name, p in params.items():
        g = grads[name]
        slot = state.slots[name]
        g2 = g * g + EPS1
        if "row" in slot:
            row = beta2 * slot["row"] + (1.0 - beta2) * g2.mean(-1)
            col = beta2 * slot["col"] + (1.0 - beta2) * g2.mean(-2)
            vhat = factored_second_moment(row, col)
            new_slots[name] = {"row": row, "col": col}
        else:
            vhat = beta2 * slot["v"] + (1.0 - beta2) * g2
            new_slots[name] = {"v": vhat}
        u = g / vhat.sqrt()
        u = u / torch.clamp(_rms(u) / CLIP_THRESHOLD, min=1.0)
        new_params[name] = p - lr * u
    return new_params, AdafactorState(new_slots, t)
