"""Agreement filtering of machine-translated speech-translation targets.

Two MT systems translate the same source; the primary output is kept as the
training target when the secondary output agrees with it closely enough
under WER, CER, BLEU or embedding cosine distance.
"""

from __future__ import annotations

import csv
import json
import math
import re
import unicodedata
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import ManifestRecord, write_manifest

METRICS = ("wer", "cer", "bleu", "cosine")
DEFAULT_THRESHOLDS = {"de": ("wer", 0.3), "ja": ("cer", 0.4)}


class FilterInputError(ValueError):
    pass


# ------------------------------------------------------------------ normalization

_WS = re.compile(r"\s+")


def normalize(text: str) -> str:
    """NFC, lowercase, collapse whitespace runs; punctuation is kept."""
    return _WS.sub(" ", unicodedata.normalize("NFC", text).lower()).strip()


# ------------------------------------------------------------------ edit-distance metrics

def levenshtein(a: Sequence, b: Sequence) -> int:
    """Unit-cost insert/delete/substitute distance between token sequences."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def _error_rate(ref: list, hyp: list) -> float:
    if not ref:
        # empty reference: every hypothesis token counts as an error
        return float(len(hyp))
    return levenshtein(ref, hyp) / len(ref)


def wer(reference: str, hypothesis: str, norm: bool = True) -> float:
    if norm:
        reference, hypothesis = normalize(reference), normalize(hypothesis)
    return _error_rate(reference.split(), hypothesis.split())


def cer(reference: str, hypothesis: str, norm: bool = True) -> float:
    if norm:
        reference, hypothesis = normalize(reference), normalize(hypothesis)
    return _error_rate(list(reference), list(hypothesis))


# ------------------------------------------------------------------ BLEU

def tokenize_13a(line: str) -> list[str]:
    """The mteval-v13a tokenizer used by most BLEU toolkits."""
    line = line.replace("<skipped>", "").replace("-\n", "").replace("\n", " ")
    if "&" in line:
        line = (line.replace("&quot;", '"').replace("&amp;", "&")
                .replace("&lt;", "<").replace("&gt;", ">"))
    line = f" {line} "
    line = re.sub(r"([\{-\~\[-\` -\&\(-\+\:-\@\/])", r" \1 ", line)
    line = re.sub(r"([^0-9])([\.,])", r"\1 \2 ", line)
    line = re.sub(r"([\.,])([^0-9])", r" \1 \2", line)
    line = re.sub(r"([0-9])(-)", r"\1 \2 ", line)
    return line.split()


def tokenize_char(line: str) -> list[str]:
    """One token per non-space character (for unsegmented scripts)."""
    return [c for c in line if not c.isspace()]


TOKENIZERS = {"13a": tokenize_13a, "char": tokenize_char, "whitespace": str.split}


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


@dataclass
class BleuStats:
    matches: list[int] = field(default_factory=lambda: [0] * 4)
    totals: list[int] = field(default_factory=lambda: [0] * 4)
    hyp_len: int = 0
    ref_len: int = 0

    @property
    def score(self) -> float:
        if self.hyp_len == 0 or any(m == 0 for m in self.matches):
            return 0.0
        log_p = sum(math.log(m / t) for m, t in zip(self.matches, self.totals)) / 4
        bp = 1.0 if self.hyp_len > self.ref_len else math.exp(1 - self.ref_len / self.hyp_len)
        return 100.0 * bp * math.exp(log_p)


def bleu_stats(references: Sequence[str], hypotheses: Sequence[str], norm: bool = True,
               tokenize: str = "13a") -> BleuStats:
    if len(references) != len(hypotheses):
        raise FilterInputError(f"{len(references)} references vs {len(hypotheses)} hypotheses")
    tok = TOKENIZERS[tokenize]
    st = BleuStats()
    for ref, hyp in zip(references, hypotheses):
        if norm:
            ref, hyp = normalize(ref), normalize(hyp)
        r, h = tok(ref), tok(hyp)
        st.hyp_len += len(h)
        st.ref_len += len(r)
        for n in range(1, 5):
            hn, rn = _ngrams(h, n), _ngrams(r, n)
            st.matches[n - 1] += sum(min(c, rn[g]) for g, c in hn.items())
            st.totals[n - 1] += max(0, len(h) - n + 1)
    return st


def bleu(references: Sequence[str], hypotheses: Sequence[str], norm: bool = True,
         tokenize: str = "13a") -> float:
    """Corpus BLEU-4: counts pooled over the corpus, uniform weights, no smoothing."""
    st = bleu_stats(references, hypotheses, norm, tokenize)
    if st.hyp_len == st.ref_len and st.matches == st.totals:
        return 100.0
    return st.score


# ------------------------------------------------------------------ embeddings

def cosine_distance(u, v) -> float:
    u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise FilterInputError(f"embedding shapes differ: {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise FilterInputError("cosine distance of a zero vector")
    return float(np.clip(1.0 - float(u @ v) / (nu * nv), 0.0, 2.0))


# ------------------------------------------------------------------ pairs and filtering

@dataclass
class TranslationPair:
    id: str
    source_text: str
    primary_out: str
    secondary_out: str
    primary_emb: list[float] | None = None
    secondary_emb: list[float] | None = None
    quality: float | None = None
    # optional speech-side fields used when emitting a filtered manifest
    audio: str | None = None
    duration_s: float | None = None
    src_lang: str = "en"
    tgt_lang: str | None = None
    corpus: str = "default"

    def __post_init__(self):
        if not (self.source_text.strip() and self.primary_out.strip() and self.secondary_out.strip()):
            raise FilterInputError(f"{self.id}: empty text field")
        if (self.primary_emb is not None and self.secondary_emb is not None
                and len(self.primary_emb) != len(self.secondary_emb)):
            raise FilterInputError(f"{self.id}: embedding dimensions differ")

    @property
    def source_len(self) -> int:
        return len(self.source_text.split())


@dataclass(frozen=True)
class FilterSpec:
    metric: str = "wer"
    threshold: float = 0.3
    norm: bool = True
    bleu_tokenize: str = "13a"

    def __post_init__(self):
        if self.metric not in METRICS:
            raise FilterInputError(f"unknown metric {self.metric!r}; expected one of {METRICS}")
        t = self.threshold
        if math.isnan(t):
            raise FilterInputError("threshold is NaN")
        if self.metric in ("wer", "cer") and t < 0:
            raise FilterInputError(f"{self.metric} threshold must be >= 0")
        if self.metric == "bleu" and not 0 <= t <= 100:
            raise FilterInputError("bleu threshold must lie in [0, 100]")
        if self.metric == "cosine" and t < 0:
            raise FilterInputError("cosine threshold must be >= 0")

    @property
    def higher_is_better(self) -> bool:
        return self.metric == "bleu"

    def keeps(self, value: float) -> bool:
        return value >= self.threshold if self.higher_is_better else value <= self.threshold

    @classmethod
    def for_language(cls, tgt_lang: str) -> "FilterSpec":
        metric, t = DEFAULT_THRESHOLDS.get(tgt_lang, ("wer", 0.3))
        return cls(metric, t)


def pair_metric(pair: TranslationPair, spec: FilterSpec) -> float:
    """Disagreement/agreement of the secondary output against the primary one.

    For BLEU this is the unsmoothed corpus BLEU of the one-pair corpus.
    """
    ref, hyp = pair.primary_out, pair.secondary_out
    if spec.metric == "wer":
        return wer(ref, hyp, spec.norm)
    if spec.metric == "cer":
        return cer(ref, hyp, spec.norm)
    if spec.metric == "bleu":
        return bleu([ref], [hyp], spec.norm, spec.bleu_tokenize)
    return cosine_distance(pair.primary_emb, pair.secondary_emb)


def pair_metrics(pairs: Sequence[TranslationPair], spec: FilterSpec) -> list[float]:
    if spec.metric == "cosine":
        missing = [p.id for p in pairs if p.primary_emb is None or p.secondary_emb is None]
        if missing:
            raise FilterInputError("cosine metric needs embeddings; missing for: " + ", ".join(missing))
    return [pair_metric(p, spec) for p in pairs]


def _mean(xs: Sequence[float]) -> float | None:
    return math.fsum(xs) / len(xs) if xs else None


@dataclass
class FilterStats:
    metric: str
    threshold: float
    total: int
    kept: int
    kept_fraction: float
    mean_metric_all: float | None
    mean_metric_kept: float | None
    mean_src_len_all: float | None
    mean_src_len_kept: float | None


def filter_pairs(pairs: Sequence[TranslationPair], spec: FilterSpec,
                 values: Sequence[float] | None = None) -> tuple[list[TranslationPair], FilterStats]:
    """Keep pairs whose agreement passes ``spec``; input order is preserved."""
    values = pair_metrics(pairs, spec) if values is None else values
    kept_idx = [i for i, v in enumerate(values) if spec.keeps(v)]
    kept = [pairs[i] for i in kept_idx]
    n = len(pairs)
    stats = FilterStats(
        metric=spec.metric, threshold=spec.threshold, total=n, kept=len(kept),
        kept_fraction=len(kept) / n if n else 0.0,
        mean_metric_all=_mean(values), mean_metric_kept=_mean([values[i] for i in kept_idx]),
        mean_src_len_all=_mean([p.source_len for p in pairs]),
        mean_src_len_kept=_mean([p.source_len for p in kept]),
    )
    return kept, stats


@dataclass
class CurvePoint:
    threshold: float
    fraction: float
    mean_quality: float


def selection_curve(pairs: Sequence[TranslationPair], spec: FilterSpec) -> list[CurvePoint]:
    """Sweep the threshold over every observed metric value.

    Each row gives the kept fraction and the mean quality score of the kept
    subset; rows are sorted by fraction ascending.
    """
    if not pairs:
        raise FilterInputError("no pairs")
    missing = [p.id for p in pairs if p.quality is None]
    if missing:
        raise FilterInputError("quality score missing for: " + ", ".join(missing))
    values = pair_metrics(pairs, spec)
    rows = []
    for t in sorted(set(values), reverse=spec.higher_is_better):
        s = FilterSpec(spec.metric, t, spec.norm, spec.bleu_tokenize)
        kept = [p for p, v in zip(pairs, values) if s.keeps(v)]
        rows.append(CurvePoint(t, len(kept) / len(pairs), _mean([p.quality for p in kept])))
    rows.sort(key=lambda r: r.fraction)
    return rows


def curve_value_at(curve: Sequence[CurvePoint], fraction: float) -> float:
    """Mean quality of the smallest selection keeping at least ``fraction`` of the data."""
    for row in curve:
        if row.fraction >= fraction - 1e-12:
            return row.mean_quality
    return curve[-1].mean_quality


@dataclass
class LengthBias:
    mean_src_len_kept: float | None
    mean_src_len_all: float | None
    ratio: float | None
    biased_short: bool


def length_bias_report(pairs: Sequence[TranslationPair], spec: FilterSpec,
                       tolerance: float = 0.05) -> LengthBias:
    """Compare mean source length of the kept subset with the whole set.

    ``biased_short`` is set when the kept subset is shorter by more than
    ``tolerance`` (relative). An empty selection reports ``None`` means.
    """
    _, st = filter_pairs(pairs, spec)
    if st.mean_src_len_kept is None or not st.mean_src_len_all:
        return LengthBias(st.mean_src_len_kept, st.mean_src_len_all, None, False)
    ratio = st.mean_src_len_kept / st.mean_src_len_all
    return LengthBias(st.mean_src_len_kept, st.mean_src_len_all, ratio, ratio < 1.0 - tolerance)


# ------------------------------------------------------------------ file IO

def read_pairs(path) -> list[TranslationPair]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                pairs.append(TranslationPair(**json.loads(line)))
            except (TypeError, json.JSONDecodeError) as e:
                raise FilterInputError(f"{path}:{lineno}: {e}") from None
    return pairs


def write_pairs(path, pairs: Iterable[TranslationPair]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(json.dumps(asdict(p), ensure_ascii=False, sort_keys=True) + "\n")


def to_manifest(pairs: Sequence[TranslationPair]) -> list[ManifestRecord]:
    """AST manifest records whose translation is the primary output."""
    missing = [p.id for p in pairs if not p.audio or not p.duration_s or not p.tgt_lang]
    if missing:
        raise FilterInputError("audio, duration_s or tgt_lang missing for: " + ", ".join(missing))
    return [ManifestRecord(id=p.id, audio=p.audio, text=p.source_text, duration_s=p.duration_s,
                           corpus=p.corpus, task="ast", src_lang=p.src_lang,
                           translation=p.primary_out, tgt_lang=p.tgt_lang) for p in pairs]


def write_filtered_manifest(path, pairs: Sequence[TranslationPair]) -> None:
    write_manifest(path, to_manifest(pairs))


def write_curve_csv(path, curve: Sequence[CurvePoint]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "fraction", "mean_quality"])
        for r in curve:
            w.writerow([repr(float(r.threshold)), repr(float(r.fraction)), repr(float(r.mean_quality))])


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if hasattr(obj, "__dataclass_fields__"):
        obj = asdict(obj)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
