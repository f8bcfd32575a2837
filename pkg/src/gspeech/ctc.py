"""CTC loss (log-space forward-backward) and greedy decoding."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import Tensor, make_op

log = logging.getLogger(__name__)

NEG_INF = -np.inf


@dataclass
class Alphabet:
    """Output symbols; ``symbols[blank_index]`` is the CTC blank."""

    symbols: list[str]
    blank_index: int = 0

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("alphabet symbols must be distinct")
        if not 0 <= self.blank_index < len(self.symbols):
            raise ValueError("blank index out of range")
        self._index = {s: i for i, s in enumerate(self.symbols)}

    def __len__(self):
        return len(self.symbols)

    def encode(self, text: str) -> list[int]:
        try:
            ids = [self._index[c] for c in text]
        except KeyError as e:
            raise ValueError(f"symbol {e.args[0]!r} not in alphabet") from None
        if self.blank_index in ids:
            raise ValueError("target text contains the blank symbol")
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        return "".join(self.symbols[i] for i in ids)

    @classmethod
    def english(cls) -> "Alphabet":
        """42 symbols: blank, space, a-z, apostrophe, digits, - . ?"""
        syms = ["<b>", " "] + [chr(c) for c in range(97, 123)] + ["'"]
        syms += [str(d) for d in range(10)] + ["-", ".", "?"]
        return cls(syms, 0)

    @classmethod
    def from_chars(cls, chars: str) -> "Alphabet":
        return cls(["<b>"] + list(chars), 0)


@dataclass
class CtcResult:
    loss: Tensor           # scalar; +inf when the target is infeasible
    log_probs: Tensor      # [T, V]
    feasible: bool


def min_frames(target: Sequence[int]) -> int:
    """Shortest input that can emit ``target``: one frame per symbol plus a
    blank between each adjacent repeat."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _logsumexp2(a, b):
    m = np.maximum(a, b)
    out = np.full_like(m, NEG_INF)
    ok = np.isfinite(m)
    out[ok] = m[ok] + np.log(np.exp(a[ok] - m[ok]) + np.exp(b[ok] - m[ok]))
    return out


def _forward_backward(lp: np.ndarray, ext: np.ndarray):
    T, S = lp.shape[0], ext.size
    emit = lp[:, ext]  # [T, S]
    # skip transition s-2 -> s allowed when ext[s] is a label differing from ext[s-2]
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != ext[:-2]) & (ext[2:] != ext[0])
    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = _logsumexp2(acc[1:], prev[:-1])
        sk = np.full(S, NEG_INF)
        sk[2:] = np.where(skip[2:], prev[:-2], NEG_INF)
        acc = _logsumexp2(acc, sk)
        alpha[t] = acc + emit[t]
    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = emit[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = emit[T - 1, S - 2]
    skip_from = np.zeros(S, dtype=bool)
    skip_from[:-2] = skip[2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = _logsumexp2(acc[:-1], nxt[1:])
        sk = np.full(S, NEG_INF)
        sk[:-2] = np.where(skip_from[:-2], nxt[2:], NEG_INF)
        acc = _logsumexp2(acc, sk)
        beta[t] = acc + emit[t]
    ends = alpha[T - 1, S - 1:] if S == 1 else alpha[T - 1, S - 2:]
    m = ends.max()
    log_p = m + np.log(np.exp(ends - m).sum()) if np.isfinite(m) else NEG_INF
    return alpha, beta, log_p


def ctc_loss(log_probs: Tensor, target: Sequence[int], blank: int = 0) -> CtcResult:
    """Negative log of the total probability of all alignments of ``target``.

    ``log_probs`` are per-frame log posteriors [T, V]. An infeasible target
    (too long for T) gives an infinite loss with ``feasible=False`` and no
    gradient path.
    """
    lp = log_probs.data.astype(np.float64)
    T, V = lp.shape
    if T < 1 or V < 2:
        raise ValueError(f"ctc_loss needs T >= 1 and V >= 2, got {lp.shape}")
    target = [int(c) for c in target]
    if any(c == blank or not 0 <= c < V for c in target):
        raise ValueError("target must contain only non-blank symbols in range")
    if min_frames(target) > T:
        log.debug("infeasible CTC target: %d symbols for %d frames", len(target), T)
        return CtcResult(Tensor(np.inf), log_probs, False)
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    if np.isnan(lp).any():
        # corrupted posteriors are reported, not mistaken for a length problem
        return CtcResult(Tensor(np.nan), log_probs, True)
    alpha, beta, log_p = _forward_backward(lp, ext)
    if not np.isfinite(log_p):
        return CtcResult(Tensor(np.inf), log_probs, False)

    def back(g):
        # d(-log P)/d lp[t,k] = -(posterior occupancy of symbol k at frame t)
        occ_log = alpha + beta - lp[:, ext] - log_p
        occ = np.zeros_like(lp)
        np.add.at(occ, (slice(None), ext), np.exp(occ_log))
        return (-(g * occ).astype(log_probs.data.dtype),)

    loss = make_op(np.asarray(-log_p, dtype=log_probs.data.dtype), (log_probs,), back)
    return CtcResult(loss, log_probs, True)


def ctc_greedy_ids(log_probs, blank: int = 0) -> list[int]:
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    best = lp.argmax(axis=-1)
    out, prev = [], None
    for k in best:
        k = int(k)
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return out


def ctc_greedy_decode(log_probs, alphabet: Alphabet) -> str:
    """Per-frame argmax, collapse repeats, drop blanks."""
    return alphabet.decode(ctc_greedy_ids(log_probs, alphabet.blank_index))
