"""AdamW and the learning-rate schedules used by both training phases."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .store import NamedTensorStore


@dataclass(frozen=True)
class TriangularSchedule:
    """Linear ramp ``lr_start -> lr_peak`` over ``warmup_steps``, then linear
    decay to ``lr_end`` at ``total_steps``."""

    total_steps: int
    warmup_steps: int
    lr_start: float
    lr_peak: float
    lr_end: float

    def __post_init__(self):
        if self.total_steps < 0 or not 0 <= self.warmup_steps <= max(self.total_steps, 0):
            raise ValueError("warmup_steps must lie in [0, total_steps]")

    def __call__(self, step: int) -> float:
        if self.warmup_steps > 0 and step < self.warmup_steps:
            frac = step / self.warmup_steps
            return self.lr_start + frac * (self.lr_peak - self.lr_start)
        span = self.total_steps - self.warmup_steps
        if span <= 0:
            return self.lr_peak
        frac = min(1.0, (step - self.warmup_steps) / span)
        return self.lr_peak + frac * (self.lr_end - self.lr_peak)


class AdamW:
    """Decoupled-weight-decay Adam over a NamedTensorStore.

    Parameters and moments are float32; the update arithmetic is float64.
    """

    def __init__(self, names, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01,
                 clip_norm: float | None = None):
        self.names = list(names)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: NamedTensorStore, grads: dict[str, np.ndarray], lr: float) -> float:
        """Apply one update in place; returns the pre-clip global grad norm."""
        sq = 0.0
        for n in self.names:
            g = grads.get(n)
            if g is not None:
                sq += float(np.sum(np.square(g, dtype=np.float64)))
        norm = float(np.sqrt(sq))
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / (norm + 1e-12)
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for n in self.names:
            g = grads.get(n)
            if g is None:
                continue
            g = np.asarray(g, dtype=np.float64) * scale
            w = params[n].astype(np.float64)
            m = self.m.get(n, np.zeros(w.shape, np.float32)).astype(np.float64)
            v = self.v.get(n, np.zeros(w.shape, np.float32)).astype(np.float64)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            w = w * (1.0 - lr * self.weight_decay)
            w = w - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            params[n] = w
            self.m[n] = m.astype(np.float32)
            self.v[n] = v.astype(np.float32)
        return norm

    def state_store(self) -> NamedTensorStore:
        st = NamedTensorStore()
        st["optim.step"] = np.array([self.step_count], dtype=np.float32)
        for n in self.names:
            if n in self.m:
                st[f"optim.m.{n}"] = self.m[n]
                st[f"optim.v.{n}"] = self.v[n]
        return st

    def load_state(self, st: NamedTensorStore) -> None:
        self.step_count = int(st["optim.step"][0])
        for n in self.names:
            if f"optim.m.{n}" in st:
                self.m[n] = np.array(st[f"optim.m.{n}"])
                self.v[n] = np.array(st[f"optim.v.{n}"])
