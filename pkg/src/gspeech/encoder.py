"""Conformer acoustic encoder with block self-attention and self-conditioned CTC.

Parameter names follow ``enc.layer{i}.{sublayer}.{param}``; see
``encoder_param_shapes`` for the full list.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .audio import AugmentPolicy, FeatureSequence, Waveform, encoder_features, maybe_add_noise
from .ctc import Alphabet, ctc_loss
from .numerics import AdamW, NamedTensorStore, Tensor, TriangularSchedule

log = logging.getLogger(__name__)

MASK_VALUE = -1e30


class EncoderConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message, last_good: NamedTensorStore | None):
        super().__init__(message)
        self.last_good = last_good


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int = 160
    num_layers: int = 10
    hidden_dim: int = 1024
    num_heads: int = 8
    head_size: int = 128
    conv_kernel: int = 15
    output_dim: int = 42
    block_seconds: float = 4.0
    frame_rate_hz: float = 50.0
    ff_mult: int = 4
    rel_pos_dim: int = 16
    w_inter: float = 0.2
    w_final: float = 0.8
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.num_heads * self.head_size != self.hidden_dim:
            raise EncoderConfigError(
                f"num_heads*head_size = {self.num_heads * self.head_size} != hidden_dim {self.hidden_dim}")
        if self.conv_kernel % 2 == 0:
            raise EncoderConfigError("conv_kernel must be odd")
        if abs(self.w_inter + self.w_final - 1.0) > 1e-12:
            raise EncoderConfigError("w_inter + w_final must equal 1")
        if self.num_layers < 1:
            raise EncoderConfigError("num_layers must be >= 1")

    @property
    def intermediate_layer(self) -> int:
        """1-based layer after which intermediate CTC logits are taken."""
        n = self.num_layers
        return n // 2 if n % 2 == 0 else n // 2 + 1

    @property
    def block_frames(self) -> int:
        return max(1, int(round(self.block_seconds * self.frame_rate_hz)))

    @classmethod
    def toy(cls, output_dim: int = 6, **kw) -> "EncoderConfig":
        base = dict(num_layers=2, hidden_dim=64, num_heads=4, head_size=16, conv_kernel=15,
                    output_dim=output_dim)
        base.update(kw)
        return cls(**base)


# ------------------------------------------------------------------ parameters

def encoder_param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    h, f, V = cfg.hidden_dim, cfg.hidden_dim * cfg.ff_mult, cfg.output_dim
    shapes: dict[str, tuple[int, ...]] = {
        "enc.cmvn.mean": (cfg.input_dim,),
        "enc.cmvn.istd": (cfg.input_dim,),
        "enc.input.w": (cfg.input_dim, h),
        "enc.input.b": (h,),
    }
    for i in range(cfg.num_layers):
        p = f"enc.layer{i}"
        for ff in ("ff1", "ff2"):
            shapes.update({
                f"{p}.{ff}.ln.g": (h,), f"{p}.{ff}.ln.b": (h,),
                f"{p}.{ff}.w1": (h, f), f"{p}.{ff}.b1": (f,),
                f"{p}.{ff}.w2": (f, h), f"{p}.{ff}.b2": (h,),
            })
        shapes.update({
            f"{p}.mhsa.ln.g": (h,), f"{p}.mhsa.ln.b": (h,),
            f"{p}.mhsa.wq": (h, h), f"{p}.mhsa.bq": (h,),
            f"{p}.mhsa.wk": (h, h), f"{p}.mhsa.bk": (h,),
            f"{p}.mhsa.wv": (h, h), f"{p}.mhsa.bv": (h,),
            f"{p}.mhsa.wo": (h, h), f"{p}.mhsa.bo": (h,),
            f"{p}.mhsa.rel": (cfg.rel_pos_dim, cfg.num_heads),
            f"{p}.conv.ln.g": (h,), f"{p}.conv.ln.b": (h,),
            f"{p}.conv.pw1.w": (h, 2 * h), f"{p}.conv.pw1.b": (2 * h,),
            f"{p}.conv.dw.k": (cfg.conv_kernel, h), f"{p}.conv.dw.b": (h,),
            f"{p}.conv.norm.g": (h,), f"{p}.conv.norm.b": (h,),
            f"{p}.conv.pw2.w": (h, h), f"{p}.conv.pw2.b": (h,),
            f"{p}.out_ln.g": (h,), f"{p}.out_ln.b": (h,),
        })
    shapes.update({
        "enc.fb.w": (V, h), "enc.fb.b": (h,),
        "enc.fb.ln.g": (h,), "enc.fb.ln.b": (h,),
        "enc.out.w": (h, V), "enc.out.b": (V,),
    })
    return shapes


FROZEN_ENCODER_STATS = ("enc.cmvn.mean", "enc.cmvn.istd")


def init_encoder(cfg: EncoderConfig, seed: int = 0,
                 feature_mean=None, feature_std=None) -> NamedTensorStore:
    rng = np.random.default_rng(seed)
    store = NamedTensorStore()
    for name, shape in encoder_param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "enc.cmvn.mean":
            arr = np.zeros(shape) if feature_mean is None else feature_mean
        elif name == "enc.cmvn.istd":
            arr = np.ones(shape) if feature_std is None else 1.0 / np.maximum(feature_std, 1e-5)
        elif leaf == "g":
            arr = np.ones(shape)
        elif leaf in ("b", "b1", "b2", "bq", "bk", "bv", "bo"):
            arr = np.zeros(shape)
        elif leaf == "k":
            arr = rng.normal(0, 1.0 / math.sqrt(shape[0]), size=shape)
        elif leaf == "rel":
            arr = rng.normal(0, 0.1, size=shape)
        else:
            arr = rng.normal(0, 1.0 / math.sqrt(shape[0]), size=shape)
        store[name] = arr
    return store


def check_params(cfg: EncoderConfig, params: Mapping) -> None:
    for name, shape in encoder_param_shapes(cfg).items():
        if name not in params:
            raise nx.MissingTensorError(f"missing tensor {name!r}")
        got = tuple(params[name].shape)
        if got != shape:
            raise nx.MissingTensorError(f"tensor {name!r} has shape {got}, expected {shape}")


# ------------------------------------------------------------------ attention

def block_mask(T: int, block_frames: int) -> np.ndarray:
    """[T, T] boolean mask, true iff both frames share a block."""
    if block_frames < 1:
        raise ValueError("block_frames must be >= 1")
    blk = np.arange(T) // block_frames
    return blk[:, None] == blk[None, :]


def sinusoid_table(positions: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    inv = 1.0 / (10000.0 ** (np.arange(half) * 2.0 / dim))
    ang = positions[:, None] * inv[None, :]
    out = np.zeros((positions.size, dim))
    out[:, 0:2 * half:2] = np.sin(ang)
    out[:, 1:2 * half:2] = np.cos(ang)
    return out


def relative_bias(rel_proj: Tensor, T: int, num_heads: int) -> Tensor:
    """[H, T, T] attention bias from a projected sinusoid of (key - query) offset."""
    offsets = np.arange(-(T - 1), T, dtype=np.float64)
    table = nx.matmul(Tensor(sinusoid_table(offsets, rel_proj.shape[0])), rel_proj)  # [2T-1, H]
    idx = (np.arange(T)[None, :] - np.arange(T)[:, None]) + (T - 1)
    bias = table[idx]  # [T, T, H]
    return nx.transpose(bias, (2, 0, 1))


def multihead_attention(q_in: Tensor, kv_in: Tensor, p: Mapping, prefix: str, num_heads: int,
                        bias: Tensor | np.ndarray | None = None,
                        mask: np.ndarray | None = None, weights_out: list | None = None,
                        lora: Callable | None = None) -> Tensor:
    """Scaled dot-product attention over heads with [in, out] projections.

    ``mask`` is boolean [Tq, Tk] (true = may attend). ``lora``, when given,
    is called as ``lora(kind, x, base_out)`` for kind in {"q", "v"} and
    returns the adjusted projection.
    """
    Tq, Tk = q_in.shape[0], kv_in.shape[0]
    d = p[f"{prefix}.wq"].shape[1]
    hs = d // num_heads
    q = nx.linear(q_in, p[f"{prefix}.wq"], p[f"{prefix}.bq"])
    k = nx.linear(kv_in, p[f"{prefix}.wk"], p[f"{prefix}.bk"])
    v = nx.linear(kv_in, p[f"{prefix}.wv"], p[f"{prefix}.bv"])
    if lora is not None:
        q = lora("q", q_in, q)
        v = lora("v", kv_in, v)
    qh = nx.transpose(q.reshape(Tq, num_heads, hs), (1, 0, 2))
    kh = nx.transpose(k.reshape(Tk, num_heads, hs), (1, 2, 0))
    vh = nx.transpose(v.reshape(Tk, num_heads, hs), (1, 0, 2))
    scores = nx.matmul(qh, kh) * (1.0 / math.sqrt(hs))
    if bias is not None:
        scores = scores + bias
    if mask is not None:
        scores = scores + np.where(mask, 0.0, MASK_VALUE)[None]
    attn = nx.softmax(scores, axis=-1)
    if weights_out is not None:
        weights_out.append(attn.data)
    ctx = nx.matmul(attn, vh)  # [H, Tq, hs]
    ctx = nx.transpose(ctx, (1, 0, 2)).reshape(Tq, d)
    return nx.linear(ctx, p[f"{prefix}.wo"], p[f"{prefix}.bo"])


def block_self_attention(x: Tensor, p: Mapping, prefix: str, cfg: EncoderConfig,
                         block_frames: int | None = None, weights_out: list | None = None) -> Tensor:
    """MHSA restricted to non-overlapping blocks, with relative position bias."""
    T = x.shape[0]
    bf = cfg.block_frames if block_frames is None else block_frames
    bias = relative_bias(p[f"{prefix}.rel"], T, cfg.num_heads)
    return multihead_attention(x, x, p, prefix, cfg.num_heads, bias=bias,
                               mask=block_mask(T, bf), weights_out=weights_out)


# ------------------------------------------------------------------ conformer

def _feed_forward(x: Tensor, p: Mapping, prefix: str, eps: float) -> Tensor:
    h = nx.layer_norm(x, p[f"{prefix}.ln.g"], p[f"{prefix}.ln.b"], eps)
    h = nx.silu(nx.linear(h, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
    return nx.linear(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"])


def _conv_module(x: Tensor, p: Mapping, prefix: str, eps: float) -> Tensor:
    h = nx.layer_norm(x, p[f"{prefix}.ln.g"], p[f"{prefix}.ln.b"], eps)
    h = nx.glu(nx.linear(h, p[f"{prefix}.pw1.w"], p[f"{prefix}.pw1.b"]), axis=-1)
    h = nx.depthwise_conv1d(h, p[f"{prefix}.dw.k"], p[f"{prefix}.dw.b"])
    h = nx.silu(nx.layer_norm(h, p[f"{prefix}.norm.g"], p[f"{prefix}.norm.b"], eps))
    return nx.linear(h, p[f"{prefix}.pw2.w"], p[f"{prefix}.pw2.b"])


def conformer_layer(x: Tensor, p: Mapping, i: int, cfg: EncoderConfig,
                    block_frames: int | None = None, weights_out: list | None = None) -> Tensor:
    """Macaron FF/2 -> block MHSA -> conv module -> FF/2 -> layer norm."""
    pre = f"enc.layer{i}"
    eps = cfg.ln_eps
    x = x + 0.5 * _feed_forward(x, p, f"{pre}.ff1", eps)
    h = nx.layer_norm(x, p[f"{pre}.mhsa.ln.g"], p[f"{pre}.mhsa.ln.b"], eps)
    x = x + block_self_attention(h, p, f"{pre}.mhsa", cfg, block_frames, weights_out)
    x = x + _conv_module(x, p, f"{pre}.conv", eps)
    x = x + 0.5 * _feed_forward(x, p, f"{pre}.ff2", eps)
    return nx.layer_norm(x, p[f"{pre}.out_ln.g"], p[f"{pre}.out_ln.b"], eps)


@dataclass
class EncoderOutput:
    hidden: Tensor        # [T, h]
    inter_logits: Tensor  # [T, V]
    final_logits: Tensor  # [T, V]


def conformer_forward(cfg: EncoderConfig, params: Mapping, x) -> EncoderOutput:
    """Run the encoder on stacked features ``x`` ([T, input_dim] or FeatureSequence).

    After layer ``cfg.intermediate_layer`` the intermediate CTC posteriors are
    fed back: ``z = LN(x + softmax(inter_logits) @ W_fb + b_fb)``.
    """
    check_params(cfg, params)
    p = {k: (v if isinstance(v, Tensor) else Tensor(v)) for k, v in params.items()}
    feats = x.frames if isinstance(x, FeatureSequence) else x
    feats = feats.data if isinstance(feats, Tensor) else np.asarray(feats)
    if feats.ndim != 2 or feats.shape[1] != cfg.input_dim:
        raise EncoderConfigError(f"features {feats.shape} do not match input_dim {cfg.input_dim}")
    h = (Tensor(feats) - p["enc.cmvn.mean"]) * p["enc.cmvn.istd"]
    h = nx.linear(h, p["enc.input.w"], p["enc.input.b"])
    inter = None
    for i in range(cfg.num_layers):
        h = conformer_layer(h, p, i, cfg)
        if i + 1 == cfg.intermediate_layer:
            inter = nx.linear(h, p["enc.out.w"], p["enc.out.b"])
            fb = nx.linear(nx.softmax(inter, axis=-1), p["enc.fb.w"], p["enc.fb.b"])
            h = nx.layer_norm(h + fb, p["enc.fb.ln.g"], p["enc.fb.ln.b"], cfg.ln_eps)
    final = nx.linear(h, p["enc.out.w"], p["enc.out.b"])
    return EncoderOutput(h, inter, final)


def self_conditioned_loss(inter_logits: Tensor, final_logits: Tensor, target: Sequence[int],
                          w_inter: float = 0.2, w_final: float = 0.8, blank: int = 0) -> Tensor:
    """``w_inter * CTC(inter) + w_final * CTC(final)``; inf if the target is infeasible."""
    li = ctc_loss(nx.log_softmax(inter_logits, -1), target, blank)
    lf = ctc_loss(nx.log_softmax(final_logits, -1), target, blank)
    if not (li.feasible and lf.feasible):
        return Tensor(np.inf)
    if w_inter == 0.0:
        return lf.loss * w_final
    return li.loss * w_inter + lf.loss * w_final


# ------------------------------------------------------------------ training

@dataclass
class EncoderTrainConfig:
    steps: int = 200
    batch_size: int = 8
    lr_start: float = 1e-4
    lr_peak: float = 1e-3
    lr_end: float = 1e-5
    warmup_frac: float = 0.3  # 6 of 20 epochs at full scale
    weight_decay: float = 0.01
    clip_norm: float | None = 5.0
    num_parts: int = 200
    seed: int = 0
    log_every: int = 1
    augment: AugmentPolicy | None = None

    def schedule(self) -> TriangularSchedule:
        return TriangularSchedule(self.steps, int(round(self.warmup_frac * self.steps)),
                                  self.lr_start, self.lr_peak, self.lr_end)

    @classmethod
    def reference(cls) -> "EncoderTrainConfig":
        """Full-scale recipe: 20 epochs, batch 256, 5e-5 -> 5e-4 -> 5e-6."""
        return cls(steps=1_500_000, batch_size=256, lr_start=5e-5, lr_peak=5e-4,
                   lr_end=5e-6, warmup_frac=6 / 20, augment=AugmentPolicy())


@dataclass
class EncoderTrainResult:
    params: NamedTensorStore
    log_rows: list[dict] = field(default_factory=list)
    steps_done: int = 0


def feature_stats(feats: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    allf = np.concatenate(list(feats), axis=0)
    return allf.mean(axis=0), allf.std(axis=0)


def _step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, 17])


def train_encoder(cfg: EncoderConfig, waveforms: Mapping[str, Waveform], records: Sequence,
                  alphabet: Alphabet, tcfg: EncoderTrainConfig,
                  init: NamedTensorStore | None = None,
                  checkpoint_dir: Path | None = None, log_path: Path | None = None,
                  noises: Sequence[Waveform] = (), resume: Path | None = None,
                  on_epoch: Callable[[int, NamedTensorStore], None] | None = None,
                  keep_epoch_checkpoints: bool = False,
                  ) -> EncoderTrainResult:
    """AdamW training of the self-conditioned CTC encoder.

    Batches come from part-sorted epochs (``data.epoch_batches``); a
    checkpoint containing parameters and optimizer state is written at every
    epoch boundary (``encoder_last.gspc``, plus ``encoder_epochNNN.gspc`` when
    ``keep_epoch_checkpoints``). ``resume`` restarts from such a checkpoint.
    """
    from .data import epoch_batches

    if not records:
        raise ValueError("empty manifest")
    clean = {r.id: encoder_features(waveforms[r.id]).frames for r in records}
    targets = {r.id: alphabet.encode(r.text) for r in records}
    if init is None:
        mean, std = feature_stats(clean.values())
        params = init_encoder(cfg, tcfg.seed, mean, std)
    else:
        params = init.copy()
    trainable = [n for n in encoder_param_shapes(cfg) if n not in FROZEN_ENCODER_STATS]
    opt = AdamW(trainable, weight_decay=tcfg.weight_decay, clip_norm=tcfg.clip_norm)
    sched = tcfg.schedule()
    step, epoch = 0, 0
    rows: list[dict] = []
    if resume is not None:
        ck = NamedTensorStore.load(resume)
        params = ck.subset("enc.")
        opt.load_state(ck.subset("optim."))
        step = opt.step_count
        epoch = int(ck["train.epoch"][0])
    last_good = params.copy()
    if tcfg.steps == 0:
        return EncoderTrainResult(params, rows, 0)
    by_id = {r.id: r for r in records}

    while step < tcfg.steps:
        plan = epoch_batches(list(records), min(tcfg.num_parts, len(records)), tcfg.batch_size, seed=tcfg.seed + epoch)
        for batch in plan.batches:
            if step >= tcfg.steps:
                break
            lr = sched(step)
            rng = _step_rng(tcfg.seed, step)
            p = nx.params_from_store(params, trainable=lambda n: n not in FROZEN_ENCODER_STATS)
            total, li_sum, lf_sum, n_ok = None, 0.0, 0.0, 0
            for rid in batch:
                feats = clean[rid]
                if tcfg.augment is not None:
                    wav, _ = maybe_add_noise(waveforms[rid], list(noises), tcfg.augment, rng)
                    feats = encoder_features(wav, tcfg.augment, rng).frames
                out = conformer_forward(cfg, p, feats)
                li = ctc_loss(nx.log_softmax(out.inter_logits, -1), targets[rid], alphabet.blank_index)
                lf = ctc_loss(nx.log_softmax(out.final_logits, -1), targets[rid], alphabet.blank_index)
                if not (li.feasible and lf.feasible):
                    log.warning("skipping infeasible utterance %s", by_id[rid].id)
                    continue
                loss = li.loss * cfg.w_inter + lf.loss * cfg.w_final
                total = loss if total is None else total + loss
                li_sum += li.loss.item()
                lf_sum += lf.loss.item()
                n_ok += 1
            if n_ok == 0:
                step += 1
                continue
            total = total * (1.0 / n_ok)
            if not np.isfinite(total.item()):
                raise TrainingDiverged(f"non-finite loss at step {step}", last_good)
            total.backward()
            grads = {n: p[n].grad for n in trainable if p[n].grad is not None}
            opt.step(params, grads, lr)
            if step % tcfg.log_every == 0:
                rows.append({"step": step, "lr": lr, "loss_inter": li_sum / n_ok,
                             "loss_final": lf_sum / n_ok})
            step += 1
        epoch += 1
        last_good = params.copy()
        if checkpoint_dir is not None:
            ck = params.copy()
            ck.update_from(opt.state_store())
            ck["train.epoch"] = np.array([epoch], dtype=np.float32)
            ck.save(Path(checkpoint_dir) / "encoder_last.gspc")
            if keep_epoch_checkpoints:
                ck.save(Path(checkpoint_dir) / f"encoder_epoch{epoch:03d}.gspc")
        if on_epoch is not None:
            on_epoch(epoch, params)
    if log_path is not None:
        write_train_log(log_path, rows, ["step", "lr", "loss_inter", "loss_final"])
    return EncoderTrainResult(params, rows, step)


def write_train_log(path, rows: list[dict], fields: list[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in r.items()})
