"""Desk-scale speech-aware LLM stack: conformer-CTC encoder, windowed Q-former
adapter, LoRA-gated toy decoder, prompting, data sampling and AST filtering."""

__version__ = "0.1.0"
