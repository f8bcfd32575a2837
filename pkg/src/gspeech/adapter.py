"""Speech modality adapters: windowed Q-former, plus MLP and cross-attention
baselines. All three map encoder frames [T, d] to LLM-width vectors at a
reduced frame rate.

The windowed Q-former splits ``X`` into ``ceil(T/K)`` windows of ``K``
frames (the last one zero padded) and runs the same small transformer with
``N`` shared trainable queries on each window, so ``M = N * ceil(T/K)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import numerics as nx
from .encoder import multihead_attention
from .numerics import NamedTensorStore, Tensor

PROJECTOR_KINDS = ("qformer", "mlp", "xattn")


class AdapterConfigError(ValueError):
    pass


@dataclass(frozen=True)
class QFormerConfig:
    num_queries: int = 3        # N
    window_frames: int = 15     # K
    num_layers: int = 2
    model_dim: int = 256
    num_heads: int = 4
    ff_mult: int = 4
    enc_dim: int = 1024
    llm_dim: int = 2048
    ln_eps: float = 1e-5

    def __post_init__(self):
        N, K = self.num_queries, self.window_frames
        if N < 1 or K < N:
            raise AdapterConfigError(f"need N >= 1 and K >= N, got N={N}, K={K}")
        if K % N:
            raise AdapterConfigError(f"window size K={K} must be a multiple of N={N}")
        if self.model_dim % self.num_heads:
            raise AdapterConfigError("model_dim must be divisible by num_heads")

    @property
    def stride(self) -> int:
        """Temporal downsampling factor K/N (also the MLP/x-attn stride)."""
        return self.window_frames // self.num_queries

    def output_len(self, T: int) -> int:
        return self.num_queries * math.ceil(T / self.window_frames)


@dataclass
class AdapterOutput:
    Y: Tensor  # [M, llm_dim]

    @property
    def num_vectors(self) -> int:
        return self.Y.shape[0]


# ------------------------------------------------------------------ parameters

def _attn_shapes(prefix: str, D: int) -> dict:
    out = {}
    for w in ("q", "k", "v", "o"):
        out[f"{prefix}.w{w}"] = (D, D)
        out[f"{prefix}.b{w}"] = (D,)
    return out


def qformer_param_shapes(cfg: QFormerConfig) -> dict[str, tuple[int, ...]]:
    D, F = cfg.model_dim, cfg.model_dim * cfg.ff_mult
    shapes = {
        "adapter.queries": (cfg.num_queries, D),
        "adapter.in.w": (cfg.enc_dim, D), "adapter.in.b": (D,),
        "adapter.key_pos": (cfg.window_frames, D),
    }
    for layer in range(cfg.num_layers):
        p = f"adapter.layer{layer}"
        shapes.update(_attn_shapes(f"{p}.self", D))
        shapes.update(_attn_shapes(f"{p}.cross", D))
        shapes.update({
            f"{p}.self_ln.g": (D,), f"{p}.self_ln.b": (D,),
            f"{p}.cross_ln.g": (D,), f"{p}.cross_ln.b": (D,),
            f"{p}.ff.w1": (D, F), f"{p}.ff.b1": (F,),
            f"{p}.ff.w2": (F, D), f"{p}.ff.b2": (D,),
            f"{p}.ff_ln.g": (D,), f"{p}.ff_ln.b": (D,),
        })
    shapes.update({"adapter.out.w": (D, cfg.llm_dim), "adapter.out.b": (cfg.llm_dim,)})
    return shapes


def mlp_param_shapes(cfg: QFormerConfig, hidden: int | None = None) -> dict[str, tuple[int, ...]]:
    s = cfg.stride
    hidden = hidden or cfg.model_dim
    return {"adapter.mlp.w1": (s * cfg.enc_dim, hidden), "adapter.mlp.b1": (hidden,),
            "adapter.mlp.w2": (hidden, cfg.llm_dim), "adapter.mlp.b2": (cfg.llm_dim,)}


def xattn_param_shapes(cfg: QFormerConfig) -> dict[str, tuple[int, ...]]:
    s, D = cfg.stride, cfg.model_dim
    return {"adapter.xattn.wq": (s * cfg.enc_dim, D), "adapter.xattn.bq": (D,),
            "adapter.xattn.wk": (cfg.llm_dim, D)}


def param_shapes(kind: str, cfg: QFormerConfig) -> dict[str, tuple[int, ...]]:
    if kind == "qformer":
        return qformer_param_shapes(cfg)
    if kind == "mlp":
        return mlp_param_shapes(cfg)
    if kind == "xattn":
        return xattn_param_shapes(cfg)
    raise AdapterConfigError(f"unknown projector kind {kind!r}; expected one of {PROJECTOR_KINDS}")


def init_adapter(kind: str, cfg: QFormerConfig, seed: int = 0) -> NamedTensorStore:
    rng = np.random.default_rng(seed)
    store = NamedTensorStore()
    for name, shape in param_shapes(kind, cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arr = np.ones(shape)
        elif leaf.startswith("b"):
            arr = np.zeros(shape)
        elif name in ("adapter.queries", "adapter.key_pos"):
            arr = rng.normal(0, 0.5, size=shape)
        else:
            arr = rng.normal(0, 1.0 / math.sqrt(shape[0]), size=shape)
        store[name] = arr
    return store


# ------------------------------------------------------------------ Q-former

def window_partition(X, K: int) -> list:
    """Split [T, d] into ceil(T/K) windows of K rows, zero padding the last."""
    data = X.data if isinstance(X, Tensor) else np.asarray(X)
    T = data.shape[0]
    if T < 1:
        raise ValueError("window_partition needs T >= 1")
    n = math.ceil(T / K)
    pad = n * K - T
    if isinstance(X, Tensor):
        Xp = X if pad == 0 else nx.concat([X, Tensor(np.zeros((pad,) + data.shape[1:]))], axis=0)
        return [Xp[i * K:(i + 1) * K] for i in range(n)]
    Xp = np.concatenate([data, np.zeros((pad,) + data.shape[1:], dtype=data.dtype)], axis=0)
    return [Xp[i * K:(i + 1) * K] for i in range(n)]


def _p(params: Mapping) -> dict:
    return {k: (v if isinstance(v, Tensor) else Tensor(v)) for k, v in params.items()}


def qformer_window(params: Mapping, cfg: QFormerConfig, window, weights_out: list | None = None) -> Tensor:
    """N output vectors for one K-frame window.

    Per layer (post-norm, residual): query self-attention, cross-attention
    from queries to the window frames, feed-forward. Frame-position
    embeddings are added to the cross-attention keys only, so values carry
    frame content alone.
    """
    p = _p(params)
    eps = cfg.ln_eps
    w = window if isinstance(window, Tensor) else Tensor(window)
    if w.shape != (cfg.window_frames, cfg.enc_dim):
        raise AdapterConfigError(f"window shape {w.shape} != {(cfg.window_frames, cfg.enc_dim)}")
    frames = nx.linear(w, p["adapter.in.w"], p["adapter.in.b"])
    keys_in = frames + p["adapter.key_pos"]
    q = p["adapter.queries"]
    for layer in range(cfg.num_layers):
        pre = f"adapter.layer{layer}"
        q = nx.layer_norm(q + multihead_attention(q, q, p, f"{pre}.self", cfg.num_heads),
                          p[f"{pre}.self_ln.g"], p[f"{pre}.self_ln.b"], eps)
        q = nx.layer_norm(q + _cross_attention(q, keys_in, frames, p, f"{pre}.cross", cfg.num_heads,
                                               weights_out),
                          p[f"{pre}.cross_ln.g"], p[f"{pre}.cross_ln.b"], eps)
        ff = nx.linear(nx.silu(nx.linear(q, p[f"{pre}.ff.w1"], p[f"{pre}.ff.b1"])),
                       p[f"{pre}.ff.w2"], p[f"{pre}.ff.b2"])
        q = nx.layer_norm(q + ff, p[f"{pre}.ff_ln.g"], p[f"{pre}.ff_ln.b"], eps)
    return nx.linear(q, p["adapter.out.w"], p["adapter.out.b"])


def _cross_attention(q_in: Tensor, k_in: Tensor, v_in: Tensor, p: Mapping, prefix: str,
                     num_heads: int, weights_out: list | None) -> Tensor:
    Tq, Tk = q_in.shape[0], k_in.shape[0]
    D = p[f"{prefix}.wq"].shape[1]
    hs = D // num_heads
    q = nx.linear(q_in, p[f"{prefix}.wq"], p[f"{prefix}.bq"])
    k = nx.linear(k_in, p[f"{prefix}.wk"], p[f"{prefix}.bk"])
    v = nx.linear(v_in, p[f"{prefix}.wv"], p[f"{prefix}.bv"])
    qh = nx.transpose(q.reshape(Tq, num_heads, hs), (1, 0, 2))
    kh = nx.transpose(k.reshape(Tk, num_heads, hs), (1, 2, 0))
    vh = nx.transpose(v.reshape(Tk, num_heads, hs), (1, 0, 2))
    attn = nx.softmax(nx.matmul(qh, kh) * (1.0 / math.sqrt(hs)), axis=-1)
    if weights_out is not None:
        weights_out.append(attn.data)
    ctx = nx.transpose(nx.matmul(attn, vh), (1, 0, 2)).reshape(Tq, D)
    return nx.linear(ctx, p[f"{prefix}.wo"], p[f"{prefix}.bo"])


def adapt(params: Mapping, cfg: QFormerConfig, X) -> AdapterOutput:
    """Windowed Q-former over the whole sequence; rows iN..(i+1)N-1 come from window i."""
    p = _p(params)
    outs = [qformer_window(p, cfg, w) for w in window_partition(X, cfg.window_frames)]
    return AdapterOutput(nx.concat(outs, axis=0))


# ------------------------------------------------------------------ baselines

def _stack_stride(X, s: int) -> Tensor:
    """[T, d] -> [ceil(T/s), s*d] by concatenating s consecutive frames."""
    X = X if isinstance(X, Tensor) else Tensor(X)
    T, d = X.shape
    n = math.ceil(T / s)
    if n * s != T:
        X = nx.concat([X, Tensor(np.zeros((n * s - T, d)))], axis=0)
    return X.reshape(n, s * d)


def mlp_projector(params: Mapping, cfg: QFormerConfig, X) -> AdapterOutput:
    """Concatenate ``K/N`` consecutive frames, then a 2-layer MLP."""
    p = _p(params)
    h = nx.silu(nx.linear(_stack_stride(X, cfg.stride), p["adapter.mlp.w1"], p["adapter.mlp.b1"]))
    return AdapterOutput(nx.linear(h, p["adapter.mlp.w2"], p["adapter.mlp.b2"]))


def xattn_projector(params: Mapping, cfg: QFormerConfig, X, text_embedding,
                    weights_out: list | None = None) -> AdapterOutput:
    """Downsampled frames attend over the LLM's token-embedding table.

    Values are the raw embedding rows, so every output lies in their convex hull.
    """
    p = _p(params)
    E = text_embedding if isinstance(text_embedding, Tensor) else Tensor(text_embedding)
    q = nx.linear(_stack_stride(X, cfg.stride), p["adapter.xattn.wq"], p["adapter.xattn.bq"])
    k = nx.matmul(E, p["adapter.xattn.wk"])
    scale = 1.0 / math.sqrt(q.shape[1])
    attn = nx.softmax(nx.matmul(q, k.T) * scale, axis=-1)
    if weights_out is not None:
        weights_out.append(attn.data)
    return AdapterOutput(nx.matmul(attn, E))


def project(kind: str, params: Mapping, cfg: QFormerConfig, X, text_embedding=None) -> AdapterOutput:
    """Dispatch on projector kind ({qformer, mlp, xattn})."""
    if kind == "qformer":
        return adapt(params, cfg, X)
    if kind == "mlp":
        return mlp_projector(params, cfg, X)
    if kind == "xattn":
        if text_embedding is None:
            raise AdapterConfigError("xattn projector needs the LLM embedding table")
        return xattn_projector(params, cfg, X, text_embedding)
    raise AdapterConfigError(f"unknown projector kind {kind!r}")
