"""Manifests, corpus-balanced sampling, part-sorted epoch batching and a
synthetic tone-utterance dataset."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .audio import Waveform, hz_to_mel, mel_to_hz, read_wav, tone_sequence

log = logging.getLogger(__name__)

SYNTH_PREFIX = "synth:"
TABLE1_HOURS = {
    "MLS English": 44000, "GigaSpeech": 10000, "YODAS": 10000, "SPGI": 5000,
    "CommonVoice 17": 2600, "Fisher": 2000, "Librispeech": 960, "VoxPopuli": 500,
    "Switchboard": 260, "TED LIUM": 200, "AMI": 100, "Voicemail": 80, "CallHome": 18,
}


class DataError(ValueError):
    pass


@dataclass
class ManifestRecord:
    id: str
    audio: str
    text: str
    duration_s: float
    corpus: str = "default"
    task: str = "asr"
    src_lang: str = "en"
    translation: str | None = None
    tgt_lang: str | None = None

    def __post_init__(self):
        if not self.duration_s > 0:
            raise DataError(f"{self.id}: duration must be positive")
        if self.task not in ("asr", "ast"):
            raise DataError(f"{self.id}: unknown task {self.task!r}")
        if self.task == "ast" and (not self.translation or not self.tgt_lang):
            raise DataError(f"{self.id}: ast record needs translation and tgt_lang")


def read_manifest(path) -> list[ManifestRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(ManifestRecord(**json.loads(line)))
            except (TypeError, json.JSONDecodeError) as e:
                raise DataError(f"{path}:{lineno}: {e}") from None
    return records


def write_manifest(path, records: Iterable[ManifestRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r), ensure_ascii=False, sort_keys=True) + "\n")


def load_audio(record: ManifestRecord, tone_map: dict[str, float] | None = None,
               root: Path | None = None) -> Waveform:
    """Resolve ``record.audio``: a WAV path, or ``synth:<text>`` rendered as tones."""
    if record.audio.startswith(SYNTH_PREFIX):
        if tone_map is None:
            raise DataError("synthetic audio requires a tone map")
        return tone_sequence(record.audio[len(SYNTH_PREFIX):], tone_map)
    path = Path(record.audio)
    if root is not None and not path.is_absolute():
        path = root / path
    return read_wav(path)


# ------------------------------------------------------------------ balanced sampling

def balanced_probs(sizes: Sequence[float], alpha: float) -> np.ndarray:
    """Corpus probabilities ``N_i**alpha / sum_j N_j**alpha``."""
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.size == 0:
        raise DataError("no corpora")
    if np.any(sizes <= 0):
        raise DataError("corpus sizes must be positive")
    if not 0.0 <= alpha <= 1.0:
        raise DataError(f"alpha {alpha} outside [0, 1]")
    # scale by the largest corpus first so large N and small alpha stay well conditioned
    w = (sizes / sizes.max()) ** alpha
    return w / w.sum()


@dataclass
class SamplingPlan:
    corpora: list[str]
    sizes: list[float]
    alpha: float = 0.6
    probs: np.ndarray = field(init=False)

    def __post_init__(self):
        if len(self.corpora) != len(self.sizes):
            raise DataError("corpora and sizes differ in length")
        self.probs = balanced_probs(self.sizes, self.alpha)
        self._cdf = np.cumsum(self.probs)
        self._cdf[-1] = 1.0

    @classmethod
    def from_records(cls, records: Sequence[ManifestRecord], alpha: float = 0.6) -> "SamplingPlan":
        counts: dict[str, int] = {}
        for r in records:
            counts[r.corpus] = counts.get(r.corpus, 0) + 1
        names = sorted(counts)
        return cls(names, [counts[n] for n in names], alpha)


def sample_corpus(plan: SamplingPlan, rng: np.random.Generator) -> int:
    """Draw a corpus index with probability ``plan.probs[i]``."""
    if len(plan.probs) == 1:
        return 0
    return int(np.searchsorted(plan._cdf, rng.random(), side="right"))


class BalancedSampler:
    """Per-step corpus draw (with replacement), then a uniform record within it."""

    def __init__(self, records: Sequence[ManifestRecord], alpha: float = 0.6):
        self.plan = SamplingPlan.from_records(records, alpha)
        self.by_corpus = {c: [r for r in records if r.corpus == c] for c in self.plan.corpora}

    def draw(self, rng: np.random.Generator, n: int) -> list[ManifestRecord]:
        out = []
        for _ in range(n):
            pool = self.by_corpus[self.plan.corpora[sample_corpus(self.plan, rng)]]
            out.append(pool[int(rng.integers(0, len(pool)))])
        return out


def distribution_rows(names: Sequence[str], sizes: Sequence[float],
                      alphas: Sequence[float]) -> list[dict]:
    """Long-format table (corpus, natural_p, balanced_p, alpha)."""
    natural = balanced_probs(sizes, 1.0)
    rows = []
    for a in alphas:
        p = balanced_probs(sizes, a)
        for name, nat, bal in zip(names, natural, p):
            rows.append({"corpus": name, "natural_p": float(nat), "balanced_p": float(bal),
                         "alpha": float(a)})
    return rows


def write_distribution_csv(path, rows: list[dict]) -> None:
    _write_csv(path, rows, ["corpus", "natural_p", "balanced_p", "alpha"])


# ------------------------------------------------------------------ epoch batching

@dataclass
class BatchPlan:
    seed: int
    num_parts: int
    batch_size: int
    batches: list[list[str]]
    parts: list[int]  # part index of each batch

    def to_rows(self, durations: dict[str, float]) -> list[dict]:
        rows = []
        for b, (ids, part) in enumerate(zip(self.batches, self.parts)):
            for rid in ids:
                rows.append({"batch": b, "part": part, "id": rid, "duration_s": durations[rid]})
        return rows


def epoch_batches(records: Sequence[ManifestRecord], num_parts: int = 200,
                  batch_size: int = 8, seed: int = 0) -> BatchPlan:
    """Shuffle, split into ``num_parts`` contiguous parts, sort each part by
    duration and emit batches part by part, shortest first."""
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    n = len(records)
    if n == 0:
        return BatchPlan(seed, 0, batch_size, [], [])
    if num_parts > n:
        log.warning("num_parts %d exceeds record count %d; reduced", num_parts, n)
        num_parts = n
    order = np.random.default_rng(seed).permutation(n)
    batches, parts = [], []
    for pi, chunk in enumerate(np.array_split(order, num_parts)):
        part = sorted((records[i] for i in chunk), key=lambda r: r.duration_s)
        for s in range(0, len(part), batch_size):
            batches.append([r.id for r in part[s:s + batch_size]])
            parts.append(pi)
    return BatchPlan(seed, num_parts, batch_size, batches, parts)


def write_batch_plan_csv(path, plan: BatchPlan, records: Sequence[ManifestRecord]) -> None:
    _write_csv(path, plan.to_rows({r.id: r.duration_s for r in records}),
               ["batch", "part", "id", "duration_s"])


# ------------------------------------------------------------------ synthetic data

DEFAULT_SYNTH_CHARS = "abcdefghij"


def default_tone_map(chars: str = DEFAULT_SYNTH_CHARS, fmin: float = 300.0,
                     fmax: float = 3500.0) -> dict[str, float]:
    """Distinct frequencies evenly spaced on the mel scale (injective map)."""
    if len(set(chars)) != len(chars):
        raise DataError("synthetic alphabet characters must be distinct")
    freqs = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), len(chars)))
    return {c: float(round(f, 3)) for c, f in zip(chars, freqs)}


def synth_dataset(seed: int, n: int, chars: str = DEFAULT_SYNTH_CHARS,
                  min_len: int = 2, max_len: int = 8, corpus: str = "synth",
                  tone_map: dict[str, float] | None = None,
                  ) -> tuple[dict[str, Waveform], list[ManifestRecord]]:
    """``n`` random strings of 2-8 distinct characters rendered as 100 ms tones."""
    if n < 1:
        raise DataError("n must be >= 1")
    if max_len > len(chars):
        raise DataError("max_len exceeds the number of distinct characters")
    tone_map = tone_map or default_tone_map(chars)
    rng = np.random.default_rng(seed)
    waves, records = {}, []
    width = max(3, len(str(n - 1)))
    for i in range(n):
        L = int(rng.integers(min_len, max_len + 1))
        text = "".join(rng.choice(list(chars), size=L, replace=False))
        rid = f"{corpus}-{i:0{width}d}"
        waves[rid] = tone_sequence(text, tone_map)
        records.append(ManifestRecord(id=rid, audio=SYNTH_PREFIX + text, text=text,
                                      duration_s=round(0.1 * L, 10), corpus=corpus))
    return waves, records


def _write_csv(path, rows: list[dict], fields: list[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
