"""Desk-scale decoder-only LLM with audio-embedding splicing, LoRA on the
query/value projections, dual speech/text mode and beam search.

Parameters live under ``llm.*`` (frozen base) and ``lora.*`` (adapters).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .adapter import AdapterOutput
from .encoder import multihead_attention
from .numerics import NamedTensorStore, Tensor

PAD, BOS, EOS, AUDIO = "<pad>", "<bos>", "<eos>", "<|audio|>"
SYSTEM, USER, ASSISTANT = "<system>", "<user>", "<assistant>"
SPECIALS = (PAD, BOS, EOS, AUDIO, SYSTEM, USER, ASSISTANT)


class PromptError(ValueError):
    """Inconsistent placeholder/audio combination."""


class LossMaskError(ValueError):
    pass


class UnknownSymbolError(ValueError):
    pass


# ------------------------------------------------------------------ tokenizer

def _escape(sym: str) -> str:
    return sym.replace("\\", "\\\\").replace("\n", "\\n")


def _unescape(line: str) -> str:
    out, i = [], 0
    while i < len(line):
        if line[i] == "\\" and i + 1 < len(line):
            out.append("\n" if line[i + 1] == "n" else line[i + 1])
            i += 2
        else:
            out.append(line[i])
            i += 1
    return "".join(out)


class CharTokenizer:
    """Character vocabulary with reserved specials at ids 0..6.

    Vocabulary file: UTF-8, one symbol per line, line number = id; newline
    and backslash are written as ``\\n`` and ``\\\\``.
    """

    def __init__(self, symbols: Sequence[str]):
        symbols = list(symbols)
        if tuple(symbols[:len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary must start with the reserved specials")
        if len(set(symbols)) != len(symbols):
            raise ValueError("duplicate vocabulary symbols")
        self.symbols = symbols
        self.index = {s: i for i, s in enumerate(symbols)}

    @classmethod
    def build(cls, texts: Sequence[str]) -> "CharTokenizer":
        chars: set[str] = set()
        for t in texts:
            for piece in cls._split_specials(t):
                if piece not in SPECIALS:
                    chars.update(piece)
        return cls(list(SPECIALS) + sorted(chars))

    @staticmethod
    def _split_specials(text: str) -> list[str]:
        out, i = [], 0
        while i < len(text):
            if text[i] == "<":
                for sp in SPECIALS:
                    if text.startswith(sp, i):
                        out.append(sp)
                        i += len(sp)
                        break
                else:
                    out.append(text[i])
                    i += 1
            else:
                out.append(text[i])
                i += 1
        return out

    def __len__(self):
        return len(self.symbols)

    def id(self, sym: str) -> int:
        return self.index[sym]

    def encode(self, text: str) -> list[int]:
        ids = []
        for piece in self._split_specials(text):
            try:
                ids.append(self.index[piece])
            except KeyError:
                raise UnknownSymbolError(f"symbol {piece!r} not in vocabulary") from None
        return ids

    def decode(self, ids: Sequence[int], skip_special: bool = True) -> str:
        out = []
        for i in ids:
            s = self.symbols[int(i)]
            if skip_special and s in SPECIALS:
                continue
            out.append(s)
        return "".join(out)

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text("".join(_escape(s) + "\n" for s in self.symbols), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "CharTokenizer":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls([_unescape(line) for line in lines])


# ------------------------------------------------------------------ configs

@dataclass(frozen=True)
class LlmConfig:
    vocab_size: int
    num_layers: int = 2
    model_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 256
    max_seq_len: int = 256
    audio_token_id: int = 3
    eos_id: int = 2
    bos_id: int = 1
    pad_id: int = 0
    ln_eps: float = 1e-5

    def __post_init__(self):
        if not 0 <= self.audio_token_id < self.vocab_size:
            raise ValueError("audio_token_id must be inside the vocabulary")
        if self.model_dim % self.num_heads:
            raise ValueError("model_dim must be divisible by num_heads")

    @property
    def never_generate(self) -> tuple[int, ...]:
        return (self.pad_id, self.bos_id, self.audio_token_id) + tuple(range(4, len(SPECIALS)))


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 64
    alpha: float | None = None  # defaults to rank (scale 1)
    targets: tuple[str, ...] = ("q", "v")
    enabled: bool = True

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("LoRA rank must be >= 1")
        if not set(self.targets) <= {"q", "v"}:
            raise ValueError("LoRA targets are the query and value projections")

    @property
    def scale(self) -> float:
        return (self.rank if self.alpha is None else self.alpha) / self.rank

    def disabled(self) -> "LoraConfig":
        return LoraConfig(self.rank, self.alpha, self.targets, False)


@dataclass(frozen=True)
class GenerationConfig:
    beam_size: int = 4
    max_new_tokens: int = 64
    repetition_penalty: float = 3.0

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.repetition_penalty < 1.0:
            raise ValueError("repetition_penalty must be >= 1")


# ------------------------------------------------------------------ parameters

def llm_param_shapes(cfg: LlmConfig) -> dict[str, tuple[int, ...]]:
    D, F, V = cfg.model_dim, cfg.ffn_dim, cfg.vocab_size
    shapes = {"llm.tok_emb": (V, D), "llm.pos_emb": (cfg.max_seq_len, D)}
    for i in range(cfg.num_layers):
        p = f"llm.layer{i}"
        shapes.update({f"{p}.ln1.g": (D,), f"{p}.ln1.b": (D,)})
        for w in ("q", "k", "v", "o"):
            shapes[f"{p}.attn.w{w}"] = (D, D)
            shapes[f"{p}.attn.b{w}"] = (D,)
        shapes.update({
            f"{p}.ln2.g": (D,), f"{p}.ln2.b": (D,),
            f"{p}.ff.w1": (D, F), f"{p}.ff.b1": (F,),
            f"{p}.ff.w2": (F, D), f"{p}.ff.b2": (D,),
        })
    shapes.update({"llm.ln_f.g": (D,), "llm.ln_f.b": (D,), "llm.head.w": (D, V)})
    return shapes


def lora_param_shapes(cfg: LlmConfig, lora: LoraConfig) -> dict[str, tuple[int, ...]]:
    D, r = cfg.model_dim, lora.rank
    shapes = {}
    for i in range(cfg.num_layers):
        for t in lora.targets:
            shapes[f"lora.layer{i}.{t}.A"] = (D, r)
            shapes[f"lora.layer{i}.{t}.B"] = (r, D)
    return shapes


def init_llm(cfg: LlmConfig, seed: int = 0) -> NamedTensorStore:
    rng = np.random.default_rng(seed)
    store = NamedTensorStore()
    for name, shape in llm_param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arr = np.ones(shape)
        elif leaf.startswith("b"):
            arr = np.zeros(shape)
        elif name in ("llm.tok_emb", "llm.pos_emb"):
            arr = rng.normal(0, 0.5, size=shape)
        else:
            arr = rng.normal(0, 1.0 / math.sqrt(shape[0]), size=shape)
        store[name] = arr
    return store


def init_lora(cfg: LlmConfig, lora: LoraConfig, seed: int = 0) -> NamedTensorStore:
    """A ~ N(0, 1/D), B = 0, so the adapted model starts equal to the base."""
    rng = np.random.default_rng(seed)
    store = NamedTensorStore()
    for name, shape in lora_param_shapes(cfg, lora).items():
        if name.endswith(".A"):
            store[name] = rng.normal(0, 1.0 / math.sqrt(shape[0]), size=shape)
        else:
            store[name] = np.zeros(shape)
    return store


def _p(params: Mapping) -> dict:
    return {k: (v if isinstance(v, Tensor) else Tensor(v)) for k, v in params.items()}


# ------------------------------------------------------------------ LoRA

def lora_forward(W, lora: LoraConfig, x, A=None, B=None, bias=None) -> Tensor:
    """``x @ (W + (alpha/rank) A B)`` when enabled, ``x @ W`` exactly otherwise."""
    y = nx.linear(x, W, bias)
    if not lora.enabled or A is None:
        return y
    return y + nx.matmul(nx.matmul(x, A), B) * lora.scale


def merge_lora(W: np.ndarray, lora: LoraConfig, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    return np.asarray(W) + lora.scale * (np.asarray(A) @ np.asarray(B))


# ------------------------------------------------------------------ splicing

@dataclass
class SplicedSequence:
    embeddings: Tensor            # [L, D], before positional embeddings
    token_ids: np.ndarray         # [L]; -1 at audio positions
    loss_mask: np.ndarray         # [L] bool; true on response tokens
    audio_span: tuple[int, int] | None = None

    @property
    def length(self) -> int:
        return self.embeddings.shape[0]


def detect_mode(tokens: Sequence[int], audio, audio_token_id: int) -> str:
    """``"speech"`` iff the prompt has the placeholder and audio is supplied."""
    n = sum(1 for t in tokens if t == audio_token_id)
    if n > 1:
        raise PromptError("more than one audio placeholder")
    if n == 1 and audio is None:
        raise PromptError("audio placeholder without audio")
    if n == 0 and audio is not None:
        raise PromptError("audio supplied but the prompt has no placeholder")
    return "speech" if n == 1 else "text"


def embed_and_splice(tokens: Sequence[int], audio: AdapterOutput | None, params: Mapping,
                     cfg: LlmConfig, response_start: int | None = None) -> SplicedSequence:
    """Embed ``tokens`` and replace the audio placeholder with the adapter rows.

    ``response_start`` is the token index where the response begins; tokens
    from there on are marked in the loss mask.
    """
    detect_mode(tokens, audio, cfg.audio_token_id)
    p = _p(params)
    ids = np.asarray(tokens, dtype=np.int64)
    mask_tok = np.zeros(len(ids), dtype=bool)
    if response_start is not None:
        mask_tok[response_start:] = True
    table = p["llm.tok_emb"]
    if audio is None:
        return SplicedSequence(table[ids], ids, mask_tok, None)
    pos = int(np.flatnonzero(ids == cfg.audio_token_id)[0])
    Y = audio.Y if isinstance(audio.Y, Tensor) else Tensor(audio.Y)
    m = Y.shape[0]
    pieces = []
    if pos > 0:
        pieces.append(table[ids[:pos]])
    pieces.append(Y)
    if pos + 1 < len(ids):
        pieces.append(table[ids[pos + 1:]])
    emb = nx.concat(pieces, axis=0)
    out_ids = np.concatenate([ids[:pos], np.full(m, -1), ids[pos + 1:]])
    out_mask = np.concatenate([mask_tok[:pos], np.zeros(m, dtype=bool), mask_tok[pos + 1:]])
    return SplicedSequence(emb, out_ids, out_mask, (pos, pos + m))


# ------------------------------------------------------------------ forward

def causal_mask(L: int) -> np.ndarray:
    return np.tril(np.ones((L, L), dtype=bool))


def llm_forward(cfg: LlmConfig, params: Mapping, embeddings, lora: LoraConfig | None = None,
                lora_params: Mapping | None = None) -> Tensor:
    """Pre-norm causal transformer over input embeddings; returns [L, V] logits."""
    p = _p(params)
    x = embeddings if isinstance(embeddings, Tensor) else Tensor(embeddings)
    L = x.shape[0]
    if L > cfg.max_seq_len:
        raise ValueError(f"sequence length {L} exceeds max_seq_len {cfg.max_seq_len}")
    use_lora = lora is not None and lora.enabled and lora_params is not None
    lp = _p(lora_params) if use_lora else {}
    x = x + p["llm.pos_emb"][:L]
    mask = causal_mask(L)
    for i in range(cfg.num_layers):
        pre = f"llm.layer{i}"
        hook = _lora_hook(lp, lora, i) if use_lora else None
        h = nx.layer_norm(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"], cfg.ln_eps)
        x = x + multihead_attention(h, h, p, f"{pre}.attn", cfg.num_heads, mask=mask, lora=hook)
        h = nx.layer_norm(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"], cfg.ln_eps)
        x = x + nx.linear(nx.silu(nx.linear(h, p[f"{pre}.ff.w1"], p[f"{pre}.ff.b1"])),
                          p[f"{pre}.ff.w2"], p[f"{pre}.ff.b2"])
    x = nx.layer_norm(x, p["llm.ln_f.g"], p["llm.ln_f.b"], cfg.ln_eps)
    return nx.matmul(x, p["llm.head.w"])


def _lora_hook(lp, lora, i):
    def hook(kind, inp, base):
        if kind not in lora.targets:
            return base
        A, B = lp[f"lora.layer{i}.{kind}.A"], lp[f"lora.layer{i}.{kind}.B"]
        return base + nx.matmul(nx.matmul(inp, A), B) * lora.scale
    return hook


def next_token_loss(logits: Tensor, seq: SplicedSequence) -> Tensor:
    """Mean cross-entropy of predicting each response token from the position before it."""
    targets_pos = np.flatnonzero(seq.loss_mask)
    targets_pos = targets_pos[targets_pos > 0]
    if targets_pos.size == 0:
        raise LossMaskError("loss mask selects no positions")
    tgt = seq.token_ids[targets_pos]
    if np.any(tgt < 0):
        raise LossMaskError("loss mask covers audio positions")
    lp = nx.log_softmax(logits[targets_pos - 1], axis=-1)
    return -lp[np.arange(tgt.size), tgt].mean()


# ------------------------------------------------------------------ generation

def apply_repetition_penalty(logits: np.ndarray, generated: Sequence[int], penalty: float) -> np.ndarray:
    """Divide positive / multiply negative logits of already generated tokens."""
    out = np.array(logits, dtype=np.float64, copy=True)
    if penalty == 1.0 or not generated:
        return out
    idx = np.unique(np.asarray(generated, dtype=np.int64))
    vals = out[idx]
    out[idx] = np.where(vals > 0, vals / penalty, vals * penalty)
    return out


@dataclass
class Hypothesis:
    tokens: list[int]
    logp: float
    finished: bool = False

    @property
    def score(self) -> float:
        return self.logp / max(1, len(self.tokens))


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max()
    return z - np.log(np.exp(z).sum())


def beam_search(step_logits: Callable[[list[int]], np.ndarray], gen: GenerationConfig,
                eos_id: int, banned: Sequence[int] = ()) -> Hypothesis:
    """Length-normalized beam search.

    ``step_logits(generated)`` returns next-token logits given the tokens
    generated so far. The repetition penalty touches only generated tokens.
    Among the ranked candidates, an end token finishes a hypothesis only if
    it ranks inside the top ``beam_size``; live beams are refilled from the
    remaining candidates.
    """
    live = [Hypothesis([], 0.0)]
    finished: list[Hypothesis] = []
    banned = np.asarray(sorted(set(banned)), dtype=np.int64)
    for _ in range(gen.max_new_tokens):
        cands = []
        for h in live:
            logits = apply_repetition_penalty(step_logits(h.tokens), h.tokens, gen.repetition_penalty)
            if banned.size:
                logits[banned] = -np.inf
            lp = _log_softmax_np(logits)
            top = np.argsort(-lp, kind="stable")[:2 * gen.beam_size]
            for tok in top:
                if np.isfinite(lp[tok]):
                    cands.append((h.logp + float(lp[tok]), h.tokens, int(tok)))
        cands.sort(key=lambda c: -c[0])
        new_live = []
        for rank, (logp, toks, tok) in enumerate(cands):
            if tok == eos_id:
                if rank < gen.beam_size:
                    finished.append(Hypothesis(toks + [tok], logp, True))
                continue
            if len(new_live) < gen.beam_size:
                new_live.append(Hypothesis(toks + [tok], logp))
            if len(new_live) >= gen.beam_size:
                break
        live = new_live
        if len(finished) >= gen.beam_size or not live:
            break
    pool = finished if finished else live
    return max(pool, key=lambda h: h.score)


def greedy_decode(step_logits: Callable[[list[int]], np.ndarray], max_new_tokens: int,
                  eos_id: int, banned: Sequence[int] = (), repetition_penalty: float = 1.0) -> list[int]:
    out: list[int] = []
    for _ in range(max_new_tokens):
        logits = apply_repetition_penalty(step_logits(out), out, repetition_penalty)
        if len(banned):
            logits[np.asarray(banned)] = -np.inf
        tok = int(np.argmax(logits))
        out.append(tok)
        if tok == eos_id:
            break
    return out


def generate(cfg: LlmConfig, params: Mapping, prefix_tokens: Sequence[int],
             gen: GenerationConfig, audio: AdapterOutput | None = None,
             lora: LoraConfig | None = None, lora_params: Mapping | None = None) -> tuple[list[int], float]:
    """Beam-search continuation of ``prefix_tokens``; returns (tokens without EOS, score).

    In text mode LoRA is forced off regardless of ``lora``.
    """
    mode = detect_mode(prefix_tokens, audio, cfg.audio_token_id)
    if mode == "text":
        lora = None
    p = _p(params)
    with nx.no_grad():
        prefix = embed_and_splice(prefix_tokens, audio, p, cfg).embeddings

        def step(generated: list[int]) -> np.ndarray:
            emb = prefix
            if generated:
                emb = nx.concat([prefix, p["llm.tok_emb"][np.asarray(generated)]], axis=0)
            return llm_forward(cfg, p, emb, lora, lora_params).data[-1]

        best = beam_search(step, gen, cfg.eos_id, cfg.never_generate)
    toks = [t for t in best.tokens if t != cfg.eos_id]
    return toks, best.score
