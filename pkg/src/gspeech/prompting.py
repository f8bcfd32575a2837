"""Chat-formatted ASR / AST / CoT-AST examples and CoT output parsing.

Chat serialization uses explicit turn markers::

    <system>{system}<user>{user}<assistant>{response}

The audio placeholder inside the user turn is ``<|audio|>``.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .data import DataError, ManifestRecord

AUDIO_TOKEN = "<|audio|>"
SYSTEM_MARK, USER_MARK, ASSISTANT_MARK = "<system>", "<user>", "<assistant>"
TRANSCRIPTION_TAG = "[Transcription]"
TRANSLATION_TAG = "[Translation]"
COT_PROB = 0.3
DEFAULT_DATE = "2025-01-01"

SYSTEM_TEMPLATE = (
    "Knowledge Cutoff Date: April 2024. Today's Date: {date}.\n"
    "You are Granite, developed by IBM. You are a helpful AI assistant"
)

LANG_NAMES = {
    "de": "German", "es": "Spanish", "fr": "French", "it": "Italian",
    "pt": "Portuguese", "ja": "Japanese", "zh": "Chinese", "en": "English",
}

POOL_SIZES = {"asr": 24, "ast": 24, "cot_ast": 8}


class PromptError(ValueError):
    pass


class CotParseError(ValueError):
    pass


@dataclass(frozen=True)
class ChatExample:
    system: str
    user: str
    response: str
    task: str  # asr | ast | cot_ast | text
    tgt_lang: str | None = None

    def __post_init__(self):
        expected = 0 if self.task == "text" else 1
        if self.user.count(AUDIO_TOKEN) != expected:
            raise PromptError(f"{self.task} prompt needs {expected} audio placeholder(s)")
        if self.task == "cot_ast":
            i, j = self.response.find(TRANSCRIPTION_TAG), self.response.find(TRANSLATION_TAG)
            if i < 0 or j < i:
                raise PromptError("cot_ast response needs both tags in order")

    def render(self, include_response: bool = True) -> str:
        prefix = f"{SYSTEM_MARK}{self.system}{USER_MARK}{self.user}{ASSISTANT_MARK}"
        return prefix + self.response if include_response else prefix


@dataclass(frozen=True)
class PromptPools:
    asr: tuple[str, ...]
    ast: tuple[str, ...]
    cot_ast: tuple[str, ...]

    def __post_init__(self):
        for name in ("asr", "ast", "cot_ast"):
            for tpl in getattr(self, name):
                if tpl.count("{audio}") != 1:
                    raise PromptError(f"{name} template lacks a single {{audio}}: {tpl!r}")
                if name != "asr" and "{lang}" not in tpl:
                    raise PromptError(f"{name} template lacks {{lang}}: {tpl!r}")

    @classmethod
    def from_dir(cls, directory=None, check_sizes: bool = True) -> "PromptPools":
        """Load ``asr.txt``, ``ast.txt`` and ``cot_ast.txt`` (one template per line)."""
        pools = {}
        for name in ("asr", "ast", "cot_ast"):
            if directory is None:
                text = resources.files("gspeech.prompts").joinpath(f"{name}.txt").read_text("utf-8")
            else:
                text = (Path(directory) / f"{name}.txt").read_text("utf-8")
            pools[name] = tuple(line for line in text.splitlines() if line.strip())
            if check_sizes and len(pools[name]) != POOL_SIZES[name]:
                raise PromptError(f"{name} pool has {len(pools[name])} entries, "
                                  f"expected {POOL_SIZES[name]}")
        return cls(**pools)

    @classmethod
    def default(cls) -> "PromptPools":
        return cls.from_dir()


def render_system_prompt(date: str = DEFAULT_DATE) -> str:
    """Fixed system prompt with the ISO date substituted."""
    parts = date.split("-")
    if len(parts) != 3 or not all(p.isdigit() for p in parts) or list(map(len, parts)) != [4, 2, 2]:
        raise PromptError(f"date must be YYYY-MM-DD, got {date!r}")
    return SYSTEM_TEMPLATE.format(date=date)


def lang_name(code: str) -> str:
    return LANG_NAMES.get(code, code)


def cot_response(transcript: str, translation: str) -> str:
    return f"{TRANSCRIPTION_TAG} {transcript} {TRANSLATION_TAG} {translation}"


def _check_tag_free(record: ManifestRecord) -> None:
    for text in (record.text, record.translation or ""):
        if TRANSCRIPTION_TAG in text or TRANSLATION_TAG in text:
            raise DataError(f"{record.id}: text contains a reserved CoT tag")


def build_prompt(record: ManifestRecord, pools: PromptPools, rng: np.random.Generator,
                 date: str = DEFAULT_DATE, system: str | None = None,
                 cot_prob: float = COT_PROB) -> ChatExample:
    """Sample a task prompt for ``record``.

    AST records become CoT-AST with probability ``cot_prob``. ``system``
    overrides the default system prompt.
    """
    _check_tag_free(record)
    system = render_system_prompt(date) if system is None else system
    if record.task == "asr":
        tpl = pools.asr[int(rng.integers(len(pools.asr)))]
        user = tpl.format(audio=AUDIO_TOKEN)
        return ChatExample(system, user, record.text, "asr")
    if record.task != "ast":
        raise DataError(f"{record.id}: unsupported task {record.task!r}")
    if not record.translation or not record.tgt_lang:
        raise DataError(f"{record.id}: ast record missing translation")
    lang = lang_name(record.tgt_lang)
    if rng.random() < cot_prob:
        tpl = pools.cot_ast[int(rng.integers(len(pools.cot_ast)))]
        return ChatExample(system, tpl.format(audio=AUDIO_TOKEN, lang=lang),
                           cot_response(record.text, record.translation), "cot_ast", record.tgt_lang)
    tpl = pools.ast[int(rng.integers(len(pools.ast)))]
    return ChatExample(system, tpl.format(audio=AUDIO_TOKEN, lang=lang), record.translation,
                       "ast", record.tgt_lang)


def parse_cot_response(text: str) -> tuple[str, str]:
    """Split ``[Transcription] t [Translation] x`` into ``(t, x)``.

    Raises CotParseError when either tag is missing or they are out of
    order; callers typically fall back to treating the whole text as the
    translation.
    """
    i = text.find(TRANSCRIPTION_TAG)
    j = text.find(TRANSLATION_TAG)
    if i < 0 or j < 0 or j < i:
        raise CotParseError("missing or misordered CoT tags")
    transcript = text[i + len(TRANSCRIPTION_TAG):j].strip()
    translation = text[j + len(TRANSLATION_TAG):].strip()
    return transcript, translation
