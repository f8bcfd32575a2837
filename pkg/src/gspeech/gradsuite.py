"""Finite-difference gradient suite over every differentiable block.

Each block builds a small float64 problem, compares backprop with central
differences and reports the worst relative error against its tolerance:
1e-4 for elementary pieces, 1e-3 for composite blocks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .numerics import Tensor, grad_check

ELEMENTARY_TOL = 1e-4
COMPOSITE_TOL = 1e-3


@dataclass
class BlockResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error <= self.tolerance)


def _t(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(0, scale, size=shape), requires_grad=True)


def _weights(rng, shape):
    return rng.normal(size=shape)


def block_numerics(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    a, b = _t(rng, 4, 3), _t(rng, 3, 5)
    w = _weights(rng, (4, 5))
    worst = max(worst, grad_check(lambda: (nx.matmul(a, b) * w).sum(), [a, b]))
    x = _t(rng, 3, 6)
    w = _weights(rng, (3, 6))
    worst = max(worst, grad_check(lambda: (nx.softmax(x, -1) * w).sum(), [x]))
    worst = max(worst, grad_check(lambda: (nx.log_softmax(x, -1) * w).sum(), [x]))
    g, bb = _t(rng, 6), _t(rng, 6)
    worst = max(worst, grad_check(lambda: (nx.layer_norm(x, g, bb) * w).sum(), [x, g, bb]))
    worst = max(worst, grad_check(lambda: (nx.silu(x) * w).sum(), [x]))
    worst = max(worst, grad_check(lambda: (nx.glu(x, -1) * w[:, :3]).sum(), [x]))
    seq, k, kb = _t(rng, 7, 3), _t(rng, 3, 3), _t(rng, 3)
    wc = _weights(rng, (7, 3))
    worst = max(worst, grad_check(lambda: (nx.depthwise_conv1d(seq, k, kb) * wc).sum(), [seq, k, kb]))
    return worst


def block_conformer(seed: int = 0) -> float:
    from .encoder import EncoderConfig, conformer_layer, init_encoder

    rng = np.random.default_rng(seed)
    cfg = EncoderConfig(input_dim=6, num_layers=1, hidden_dim=8, num_heads=2, head_size=4,
                        conv_kernel=3, output_dim=4, block_seconds=0.06, rel_pos_dim=4)
    store = init_encoder(cfg, seed)
    p = {k: Tensor(v) for k, v in store.items()}
    x = _t(rng, 5, 8)
    w = _weights(rng, (5, 8))
    probe = [p[n] for n in ("enc.layer0.mhsa.wq", "enc.layer0.mhsa.rel", "enc.layer0.conv.dw.k",
                            "enc.layer0.ff1.w1", "enc.layer0.out_ln.g")]
    return grad_check(lambda: (conformer_layer(x, p, 0, cfg) * w).sum(), [x] + probe,
                      max_coords=12, seed=seed)


def block_qformer(seed: int = 0) -> float:
    from .adapter import QFormerConfig, adapt, init_adapter

    rng = np.random.default_rng(seed)
    cfg = QFormerConfig(num_queries=2, window_frames=4, num_layers=2, model_dim=8, num_heads=2,
                        ff_mult=2, enc_dim=5, llm_dim=6)
    store = init_adapter("qformer", cfg, seed)
    p = {k: Tensor(v) for k, v in store.items()}
    X = _t(rng, 7, 5)
    w = _weights(rng, (cfg.output_len(7), 6))
    probe = [p[n] for n in ("adapter.queries", "adapter.key_pos", "adapter.layer0.cross.wk",
                            "adapter.layer1.self.wv", "adapter.layer1.ff.w1", "adapter.out.w")]
    return grad_check(lambda: (adapt(p, cfg, X).Y * w).sum(), [X] + probe, max_coords=12, seed=seed)


def block_ctc(seed: int = 0) -> float:
    from .ctc import ctc_loss

    rng = np.random.default_rng(seed)
    logits = _t(rng, 8, 5)
    target = [1, 3, 3, 2]
    return grad_check(lambda: ctc_loss(nx.log_softmax(logits, -1), target).loss, [logits])


def block_lora(seed: int = 0) -> float:
    from .llm import LoraConfig, lora_forward

    rng = np.random.default_rng(seed)
    cfg = LoraConfig(rank=3, alpha=6.0)
    x, W = _t(rng, 4, 6), _t(rng, 6, 6)
    A, B = _t(rng, 6, 3), _t(rng, 3, 6)
    w = _weights(rng, (4, 6))
    return grad_check(lambda: (lora_forward(W, cfg, x, A, B) * w).sum(), [x, W, A, B])


def block_llm_loss(seed: int = 0) -> float:
    from .llm import (LlmConfig, LoraConfig, embed_and_splice, init_llm, init_lora, llm_forward,
                      next_token_loss)

    rng = np.random.default_rng(seed)
    cfg = LlmConfig(vocab_size=12, num_layers=1, model_dim=8, num_heads=2, ffn_dim=16, max_seq_len=16)
    lcfg = LoraConfig(rank=2)
    p = {k: Tensor(v) for k, v in init_llm(cfg, seed).items()}
    lp = {k: Tensor(v) for k, v in init_lora(cfg, lcfg, seed).items()}
    for k in lp:
        lp[k].data = rng.normal(0, 0.3, size=lp[k].shape)
    tokens = [1, 7, 3, 8, 9, 10, 11, 2]
    audio = _t(rng, 3, 8)

    def f():
        from .adapter import AdapterOutput
        seq = embed_and_splice(tokens, AdapterOutput(audio), p, cfg, response_start=5)
        return next_token_loss(llm_forward(cfg, p, seq.embeddings, lcfg, lp), seq)

    probe = [audio, p["llm.tok_emb"], p["llm.head.w"], lp["lora.layer0.q.A"], lp["lora.layer0.v.B"]]
    return grad_check(f, probe, max_coords=16, seed=seed)


BLOCKS: dict[str, tuple[Callable[[int], float], float]] = {
    "numerics": (block_numerics, ELEMENTARY_TOL),
    "ctc": (block_ctc, ELEMENTARY_TOL),
    "lora": (block_lora, ELEMENTARY_TOL),
    "llm_loss": (block_llm_loss, ELEMENTARY_TOL),
    "conformer": (block_conformer, COMPOSITE_TOL),
    "qformer": (block_qformer, COMPOSITE_TOL),
}


def run_suite(only: list[str] | None = None, seed: int = 0) -> list[BlockResult]:
    names = list(BLOCKS) if not only else only
    unknown = [n for n in names if n not in BLOCKS]
    if unknown:
        raise KeyError(f"unknown gradient block(s): {', '.join(unknown)}")
    results = []
    for n in names:
        fn, tol = BLOCKS[n]
        results.append(BlockResult(n, float(fn(seed)), tol))
    return results
