"""Speech-to-text orchestration: frozen encoder -> adapter -> frozen LLM base
with LoRA, plus the two toy training phases for the LLM side.

Text pretraining gives the toy base a copy skill: the user turn carries the
content inline and the response repeats it. Speech training then teaches the
adapter (and LoRA) to emit vectors the frozen base reads like that content.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .adapter import AdapterOutput, QFormerConfig, project
from .audio import Waveform, encoder_features
from .data import BalancedSampler, ManifestRecord
from .encoder import EncoderConfig, conformer_forward, write_train_log
from .llm import (AUDIO, BOS, EOS, CharTokenizer, GenerationConfig, LlmConfig, LoraConfig, detect_mode,
                  embed_and_splice, generate, init_lora, llm_forward, next_token_loss)
from .numerics import AdamW, NamedTensorStore, TriangularSchedule
from .prompting import ChatExample

log = logging.getLogger(__name__)


class FrozenParameterUpdated(AssertionError):
    pass


def example_tokens(tok: CharTokenizer, ex: ChatExample) -> tuple[list[int], int]:
    """``<bos>`` + rendered chat + ``<eos>``; returns (ids, response start index)."""
    prefix = tok.encode(BOS + ex.render(include_response=False))
    return prefix + tok.encode(ex.response + EOS), len(prefix)


def prompt_tokens(tok: CharTokenizer, system: str, user: str) -> list[int]:
    return tok.encode(BOS + ChatExample(system, user, "", "asr" if AUDIO in user else "text")
                      .render(include_response=False))


# ------------------------------------------------------------------ text pretraining

@dataclass
class TextTrainConfig:
    steps: int = 1500
    batch_size: int = 8
    lr_peak: float = 3e-3
    warmup_steps: int = 100
    lr_end: float = 1e-4
    weight_decay: float = 0.01
    clip_norm: float | None = 1.0
    seed: int = 0


def pretrain_text_llm(cfg: LlmConfig, tok: CharTokenizer,
                      sample: Callable[[np.random.Generator], ChatExample],
                      tcfg: TextTrainConfig, init: NamedTensorStore | None = None,
                      log_every: int = 100) -> tuple[NamedTensorStore, list[dict]]:
    """Train the toy base on text-mode chat examples drawn by ``sample``."""
    from .llm import init_llm

    params = init_llm(cfg, tcfg.seed) if init is None else init.copy()
    names = list(params)
    opt = AdamW(names, weight_decay=tcfg.weight_decay, clip_norm=tcfg.clip_norm)
    sched = TriangularSchedule(tcfg.steps, tcfg.warmup_steps, 0.0, tcfg.lr_peak, tcfg.lr_end)
    rng = np.random.default_rng([tcfg.seed, 101])
    rows = []
    for step in range(tcfg.steps):
        p = nx.params_from_store(params)
        total = None
        for _ in range(tcfg.batch_size):
            ids, start = example_tokens(tok, sample(rng))
            seq = embed_and_splice(ids, None, p, cfg, response_start=start)
            loss = next_token_loss(llm_forward(cfg, p, seq.embeddings), seq)
            total = loss if total is None else total + loss
        total = total * (1.0 / tcfg.batch_size)
        total.backward()
        opt.step(params, {n: p[n].grad for n in names if p[n].grad is not None}, sched(step))
        if step % log_every == 0 or step == tcfg.steps - 1:
            rows.append({"step": step, "lr": sched(step), "loss": total.item()})
    return params, rows


# ------------------------------------------------------------------ speech stack

@dataclass
class SpeechModel:
    """Everything needed to run speech or text prompts through the toy stack."""

    tokenizer: CharTokenizer
    llm_cfg: LlmConfig
    llm_params: NamedTensorStore
    lora_cfg: LoraConfig | None = None
    lora_params: NamedTensorStore | None = None
    enc_cfg: EncoderConfig | None = None
    enc_params: NamedTensorStore | None = None
    adapter_kind: str = "qformer"
    adapter_cfg: QFormerConfig | None = None
    adapter_params: NamedTensorStore | None = None

    @property
    def has_speech(self) -> bool:
        return self.enc_params is not None and self.adapter_params is not None

    def encode_audio(self, wave: Waveform, adapter_params: Mapping | None = None) -> AdapterOutput:
        if not self.has_speech:
            raise RuntimeError("speech components are not loaded")
        with nx.no_grad():
            hidden = conformer_forward(self.enc_cfg, self.enc_params,
                                       encoder_features(wave).frames).hidden.data
        return self._project(hidden, adapter_params)

    def _project(self, hidden: np.ndarray, adapter_params: Mapping | None = None) -> AdapterOutput:
        ap = self.adapter_params if adapter_params is None else adapter_params
        emb = None
        if self.adapter_kind == "xattn":
            emb = self.llm_params["llm.tok_emb"]
        return project(self.adapter_kind, ap, self.adapter_cfg, hidden, emb)

    def generate(self, system: str, user: str, wave: Waveform | None = None,
                 gen: GenerationConfig = GenerationConfig()) -> tuple[str, float]:
        """Decode a response; speech mode iff ``user`` has the placeholder and audio is given."""
        ids = prompt_tokens(self.tokenizer, system, user)
        detect_mode(ids, wave, self.llm_cfg.audio_token_id)
        audio = None if wave is None else self.encode_audio(wave)
        toks, score = generate(self.llm_cfg, self.llm_params, ids, gen, audio,
                               self.lora_cfg, self.lora_params)
        return self.tokenizer.decode(toks), score

    def text_logits(self, system: str, user: str) -> np.ndarray:
        """Next-token logits for a text-only prompt (base weights, LoRA off)."""
        ids = prompt_tokens(self.tokenizer, system, user)
        with nx.no_grad():
            p = nx.params_from_store(self.llm_params, trainable=lambda n: False)
            seq = embed_and_splice(ids, None, p, self.llm_cfg)
            return llm_forward(self.llm_cfg, p, seq.embeddings).data


# ------------------------------------------------------------------ adapter + LoRA training

@dataclass
class AdapterTrainConfig:
    steps: int = 300
    batch_size: int = 4
    lr_start: float = 0.0
    lr_peak: float = 3e-4
    lr_end: float = 3e-6
    warmup_steps: int = 30
    weight_decay: float = 0.01
    clip_norm: float | None = 5.0
    alpha: float = 0.6
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 100

    def schedule(self) -> TriangularSchedule:
        return TriangularSchedule(self.steps, self.warmup_steps, self.lr_start, self.lr_peak,
                                  self.lr_end)

    @classmethod
    def reference(cls) -> "AdapterTrainConfig":
        """Full-scale recipe: 3 epochs (660k updates), batch 128, 1000 warm-up steps, peak 1e-4."""
        return cls(steps=660_000, batch_size=128, lr_peak=1e-4, lr_end=1e-6, warmup_steps=1000)


@dataclass
class AdapterTrainResult:
    adapter_params: NamedTensorStore
    lora_params: NamedTensorStore
    log_rows: list[dict] = field(default_factory=list)
    steps_done: int = 0


ADAPTER_LOG_FIELDS = ["step", "lr", "loss", "grad_norm"]


def train_adapter_and_lora(model: SpeechModel, waveforms: Mapping[str, Waveform],
                           records: Sequence[ManifestRecord],
                           make_example: Callable[[ManifestRecord, np.random.Generator], ChatExample],
                           tcfg: AdapterTrainConfig, checkpoint_dir: Path | None = None,
                           log_path: Path | None = None, resume: Path | None = None,
                           ) -> AdapterTrainResult:
    """AdamW over adapter and LoRA tensors; encoder and LLM base stay frozen.

    Records are drawn by the corpus-balanced sampler; every
    ``checkpoint_every`` steps ``adapter_stepNNNNNN.gspc`` is kept next to
    ``adapter_last.gspc`` so a run can be replayed from there. Encoder outputs are
    computed once per record since the encoder is frozen and inputs are not
    augmented here.
    """
    if not model.has_speech:
        raise RuntimeError("train_adapter_and_lora needs an encoder and an adapter")
    if model.lora_cfg is None:
        raise RuntimeError("LoRA config missing")
    if not records:
        raise ValueError("empty manifest")
    frozen_digests = (model.enc_params.digest(), model.llm_params.digest())
    adapter = model.adapter_params.copy()
    lora = (model.lora_params.copy() if model.lora_params is not None
            else init_lora(model.llm_cfg, model.lora_cfg, tcfg.seed))
    params = adapter.copy()
    params.update_from(lora)
    names = list(params)
    if any(n.startswith(("enc.", "llm.")) for n in names):
        raise FrozenParameterUpdated("frozen tensor listed as trainable")
    opt = AdamW(names, weight_decay=tcfg.weight_decay, clip_norm=tcfg.clip_norm)
    step = 0
    if resume is not None:
        ck = NamedTensorStore.load(resume)
        params.update_from(ck.subset("adapter."))
        params.update_from(ck.subset("lora."))
        opt.load_state(ck.subset("optim."))
        step = opt.step_count

    with nx.no_grad():
        enc_p = nx.params_from_store(model.enc_params, trainable=lambda n: False)
        hidden = {r.id: conformer_forward(model.enc_cfg, enc_p,
                                          encoder_features(waveforms[r.id]).frames).hidden.data
                  for r in records}
    llm_p = nx.params_from_store(model.llm_params, trainable=lambda n: False)
    sampler = BalancedSampler(records, tcfg.alpha)
    sched = tcfg.schedule()
    rows: list[dict] = []

    def save_checkpoint(keep: bool = False):
        if checkpoint_dir is None:
            return
        ck = params.copy()
        ck.update_from(opt.state_store())
        ck.save(Path(checkpoint_dir) / "adapter_last.gspc")
        if keep:
            ck.save(Path(checkpoint_dir) / f"adapter_step{step:06d}.gspc")

    while step < tcfg.steps:
        rng = np.random.default_rng([tcfg.seed, step, 29])
        batch = sampler.draw(rng, tcfg.batch_size)
        p = nx.params_from_store(params)
        ap = {n: t for n, t in p.items() if n.startswith("adapter.")}
        lp = {n: t for n, t in p.items() if n.startswith("lora.")}
        total = None
        for rec in batch:
            ex = make_example(rec, rng)
            ids, start = example_tokens(model.tokenizer, ex)
            audio = model._project(hidden[rec.id], ap)
            seq = embed_and_splice(ids, audio, llm_p, model.llm_cfg, response_start=start)
            logits = llm_forward(model.llm_cfg, llm_p, seq.embeddings, model.lora_cfg, lp)
            loss = next_token_loss(logits, seq)
            total = loss if total is None else total + loss
        total = total * (1.0 / len(batch))
        if not np.isfinite(total.item()):
            raise FloatingPointError(f"non-finite loss at step {step}")
        total.backward()
        for n, t in llm_p.items():
            if t.grad is not None:
                raise FrozenParameterUpdated(f"frozen tensor {n} received a gradient")
        lr = sched(step)
        norm = opt.step(params, {n: p[n].grad for n in names if p[n].grad is not None}, lr)
        if step % tcfg.log_every == 0 or step == tcfg.steps - 1:
            rows.append({"step": step, "lr": lr, "loss": total.item(), "grad_norm": norm})
        step += 1
        if tcfg.checkpoint_every and step % tcfg.checkpoint_every == 0:
            save_checkpoint(keep=True)
    save_checkpoint()
    if (model.enc_params.digest(), model.llm_params.digest()) != frozen_digests:
        raise FrozenParameterUpdated("frozen encoder or LLM weights changed during training")
    if log_path is not None:
        write_train_log(log_path, rows, ADAPTER_LOG_FIELDS)
    return AdapterTrainResult(params.subset("adapter."), params.subset("lora."), rows, step)
