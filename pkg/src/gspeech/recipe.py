"""Run configuration and the glue that turns it into models and data.

A run config is a nested JSON object. Every key must exist in
``DEFAULT_CONFIG``; missing keys take the defaults below, which describe the
desk-scale tone-utterance recipe.
"""

from __future__ import annotations

import copy
import json
import math
from pathlib import Path

import numpy as np

from .adapter import QFormerConfig
from .ctc import Alphabet
from .data import DataError, ManifestRecord, default_tone_map, load_audio, read_manifest
from .encoder import EncoderConfig, EncoderTrainConfig
from .llm import AUDIO, CharTokenizer, GenerationConfig, LlmConfig, LoraConfig
from .prompting import ChatExample, PromptPools, build_prompt, render_system_prompt
from .speech_llm import AdapterTrainConfig, TextTrainConfig


DEFAULT_CONFIG: dict = {
    "name": "default",
    "runs_dir": "runs",
    "seed": 0,
    "data": {"manifest": None, "audio_root": None, "chars": "abcdefghij"},
    "synth": {"n": 32, "min_len": 2, "max_len": 8, "write_wav": False},
    "encoder": {"alphabet": "synth", "num_layers": 2, "hidden_dim": 64, "num_heads": 4,
                "head_size": 16, "conv_kernel": 15},
    "encoder_train": {"steps": 200, "batch_size": 8, "lr_start": 1e-4, "lr_peak": 1e-3,
                      "lr_end": 1e-5, "warmup_frac": 0.3, "clip_norm": 5.0, "num_parts": 200,
                      "log_every": 1, "keep_epoch_checkpoints": False},
    "llm": {"num_layers": 2, "model_dim": 64, "num_heads": 4, "ffn_dim": 256, "max_seq_len": 64},
    "llm_pretrain": {"steps": 800, "batch_size": 8, "lr_peak": 3e-3, "warmup_steps": 100,
                     "lr_end": 1e-4, "log_every": 50},
    "adapter": {"kind": "qformer", "num_queries": 2, "window_frames": 10, "num_layers": 2,
                "model_dim": 64, "num_heads": 4, "ff_mult": 2},
    "lora": {"rank": 4, "alpha": None},
    "adapter_train": {"steps": 300, "batch_size": 4, "lr_peak": 3e-4, "lr_end": 3e-6,
                      "warmup_steps": 30, "clip_norm": 5.0, "alpha": 0.6, "log_every": 10,
                      "checkpoint_every": 100},
    "prompt": {"system": "toy", "user": "transcribe: {audio}", "pools": None, "date": "2025-01-01"},
    "generation": {"beam_size": 4, "max_new_tokens": 16, "repetition_penalty": 3.0, "batch_size": 4},
    "filter": {"input": None, "metric": "wer", "threshold": 0.3, "curve": False, "normalize": True,
               "bleu_tokenize": "13a"},
    "plan": {"alphas": [0.0, 0.3, 0.6, 1.0], "corpora": None, "num_parts": 200, "batch_size": 8},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[k] = _merge(base[k], v, where + ".")
        else:
            out[k] = v
    return out


def resolve_config(file_cfg: dict | None = None, overrides: dict | None = None) -> dict:
    """Defaults <- config file <- command-line overrides; unknown keys raise."""
    cfg = _merge(DEFAULT_CONFIG, file_cfg or {})
    return _merge(cfg, overrides or {})


def load_config_file(path) -> dict:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return obj


def set_dotted(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    d[keys[-1]] = value


# ------------------------------------------------------------------ run directory

class RunDir:
    def __init__(self, cfg: dict):
        self.root = Path(cfg["runs_dir"]) / cfg["name"]
        self.checkpoints = self.root / "checkpoints"
        self.logs = self.root / "logs"
        self.reports = self.root / "reports"
        self.data = self.root / "data"

    def create(self) -> "RunDir":
        for d in (self.checkpoints, self.logs, self.reports):
            d.mkdir(parents=True, exist_ok=True)
        return self

    def write_config(self, cfg: dict) -> None:
        (self.root / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n",
                                               encoding="utf-8")

    @property
    def encoder_ckpt(self) -> Path:
        return self.checkpoints / "encoder.gspc"

    @property
    def adapter_ckpt(self) -> Path:
        return self.checkpoints / "adapter.gspc"

    @property
    def llm_ckpt(self) -> Path:
        return self.checkpoints / "llm_base.gspc"

    @property
    def vocab(self) -> Path:
        return self.checkpoints / "vocab.txt"


# ------------------------------------------------------------------ builders

def alphabet(cfg: dict) -> Alphabet:
    kind = cfg["encoder"]["alphabet"]
    if kind == "synth":
        return Alphabet.from_chars(cfg["data"]["chars"])
    if kind == "english":
        return Alphabet.english()
    raise ConfigError(f"unknown alphabet {kind!r}")


def encoder_config(cfg: dict) -> EncoderConfig:
    e = cfg["encoder"]
    return EncoderConfig(num_layers=e["num_layers"], hidden_dim=e["hidden_dim"],
                         num_heads=e["num_heads"], head_size=e["head_size"],
                         conv_kernel=e["conv_kernel"], output_dim=len(alphabet(cfg)))


def encoder_train_config(cfg: dict) -> EncoderTrainConfig:
    t = cfg["encoder_train"]
    return EncoderTrainConfig(steps=t["steps"], batch_size=t["batch_size"], lr_start=t["lr_start"],
                              lr_peak=t["lr_peak"], lr_end=t["lr_end"], warmup_frac=t["warmup_frac"],
                              clip_norm=t["clip_norm"], num_parts=t["num_parts"], seed=cfg["seed"],
                              log_every=t["log_every"])


def adapter_config(cfg: dict) -> QFormerConfig:
    a = cfg["adapter"]
    return QFormerConfig(num_queries=a["num_queries"], window_frames=a["window_frames"],
                         num_layers=a["num_layers"], model_dim=a["model_dim"], num_heads=a["num_heads"],
                         ff_mult=a["ff_mult"], enc_dim=cfg["encoder"]["hidden_dim"],
                         llm_dim=cfg["llm"]["model_dim"])


def llm_config(cfg: dict, vocab_size: int) -> LlmConfig:
    m = cfg["llm"]
    return LlmConfig(vocab_size=vocab_size, num_layers=m["num_layers"], model_dim=m["model_dim"],
                     num_heads=m["num_heads"], ffn_dim=m["ffn_dim"], max_seq_len=m["max_seq_len"])


def lora_config(cfg: dict) -> LoraConfig:
    return LoraConfig(rank=cfg["lora"]["rank"], alpha=cfg["lora"]["alpha"])


def generation_config(cfg: dict) -> GenerationConfig:
    g = cfg["generation"]
    return GenerationConfig(beam_size=g["beam_size"], max_new_tokens=g["max_new_tokens"],
                            repetition_penalty=g["repetition_penalty"])


def _check_warmup(section: str, t: dict) -> None:
    if not 0 <= t["warmup_steps"] <= t["steps"]:
        raise ConfigError(f"{section}.warmup_steps must lie in [0, {section}.steps]")


def text_train_config(cfg: dict) -> TextTrainConfig:
    t = cfg["llm_pretrain"]
    _check_warmup("llm_pretrain", t)
    return TextTrainConfig(steps=t["steps"], batch_size=t["batch_size"], lr_peak=t["lr_peak"],
                           warmup_steps=t["warmup_steps"], lr_end=t["lr_end"], seed=cfg["seed"])


def adapter_train_config(cfg: dict) -> AdapterTrainConfig:
    t = cfg["adapter_train"]
    _check_warmup("adapter_train", t)
    return AdapterTrainConfig(steps=t["steps"], batch_size=t["batch_size"], lr_peak=t["lr_peak"],
                              lr_end=t["lr_end"], warmup_steps=t["warmup_steps"],
                              clip_norm=t["clip_norm"], alpha=t["alpha"], seed=cfg["seed"],
                              log_every=t["log_every"], checkpoint_every=t["checkpoint_every"])


# ------------------------------------------------------------------ prompts

def system_prompt(cfg: dict) -> str:
    s = cfg["prompt"]["system"]
    return render_system_prompt(cfg["prompt"]["date"]) if s == "granite" else s


def prompt_pools(cfg: dict) -> PromptPools | None:
    src = cfg["prompt"]["pools"]
    if src is None:
        return None
    return PromptPools.default() if src == "default" else PromptPools.from_dir(src)


def user_templates(cfg: dict) -> list[str]:
    pools = prompt_pools(cfg)
    if pools is None:
        return [cfg["prompt"]["user"]]
    return list(pools.asr)


def speech_example(cfg: dict, record: ManifestRecord, rng: np.random.Generator) -> ChatExample:
    pools = prompt_pools(cfg)
    if pools is None:
        user = cfg["prompt"]["user"].format(audio=AUDIO)
        return ChatExample(system_prompt(cfg), user, record.text, "asr")
    return build_prompt(record, pools, rng, system=system_prompt(cfg))


def audio_vectors_for(cfg: dict, duration_s: float) -> int:
    """Adapter output count for an utterance of ``duration_s`` seconds."""
    frames = math.ceil(int(round(duration_s * 16000)) // 160 / 2)
    a = cfg["adapter"]
    if a["kind"] == "qformer":
        return a["num_queries"] * math.ceil(frames / a["window_frames"])
    stride = a["window_frames"] // a["num_queries"]
    return math.ceil(frames / stride)


def copy_example_sampler(cfg: dict, seconds_per_char: float = 0.1):
    """Text-mode stand-in for speech examples: the transcript sits where the
    audio would, padded with spaces to the adapter's output count."""
    chars = list(cfg["data"]["chars"])
    lo, hi = cfg["synth"]["min_len"], cfg["synth"]["max_len"]
    templates = user_templates(cfg)
    system = system_prompt(cfg)

    def sample(rng: np.random.Generator) -> ChatExample:
        L = int(rng.integers(lo, hi + 1))
        text = "".join(rng.choice(chars, size=L, replace=False))
        pad = max(0, audio_vectors_for(cfg, seconds_per_char * L) - L)
        tpl = templates[int(rng.integers(len(templates)))]
        return ChatExample(system, tpl.format(audio=text + " " * pad), text, "text")

    return sample


def build_tokenizer(cfg: dict) -> CharTokenizer:
    texts = [system_prompt(cfg), cfg["data"]["chars"], " "]
    texts += [t.replace("{audio}", "") for t in user_templates(cfg)]
    return CharTokenizer.build(texts)


def manifest_path(cfg: dict, run: RunDir, manifest: str | None = None) -> Path:
    path = manifest or cfg["data"]["manifest"]
    if path is None:
        default = run.data / "manifest.jsonl"
        if not default.exists():
            raise FileNotFoundError("no manifest given and no synth-data manifest in the run directory")
        path = default
    if not Path(path).exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    return Path(path)


def load_records(cfg: dict, run: RunDir, manifest: str | None = None) -> list[ManifestRecord]:
    path = manifest_path(cfg, run, manifest)
    records = read_manifest(path)
    if not records:
        raise DataError(f"{path}: empty manifest")
    return records


def load_waveforms(cfg: dict, run: RunDir, records: list[ManifestRecord],
                   manifest: str | None = None) -> dict:
    """Render or read every record's audio; relative WAV paths resolve against
    ``data.audio_root`` or else the manifest's directory."""
    tone_map = default_tone_map(cfg["data"]["chars"])
    root = cfg["data"]["audio_root"]
    root = Path(root) if root else manifest_path(cfg, run, manifest).parent
    return {r.id: load_audio(r, tone_map, root) for r in records}
