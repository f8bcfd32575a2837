"""``gspeech`` command-line entry point.

Exit codes: 0 success, 1 verification failure, 2 input error, 3 mode or
prompt error. Every command resolves its configuration (defaults, then the
``--config`` file, then flags), echoes it to ``runs/<name>/config.json`` and
writes its artifacts under that run directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path


from . import ast_filter as af
from .audio import read_wav, write_wav
from .data import (TABLE1_HOURS, DataError, distribution_rows, epoch_batches, synth_dataset,
                   write_batch_plan_csv, write_distribution_csv, write_manifest)
from .llm import AUDIO, PromptError as LlmPromptError, UnknownSymbolError
from .numerics import MissingTensorError, NamedTensorStore, StoreFormatError
from .prompting import PromptError
from .recipe import ConfigError, RunDir, load_config_file, resolve_config, set_dotted
from . import recipe

log = logging.getLogger("gspeech")

EXIT_OK, EXIT_VERIFY, EXIT_INPUT, EXIT_MODE = 0, 1, 2, 3
INPUT_ERRORS = (FileNotFoundError, DataError, ConfigError, af.FilterInputError, MissingTensorError,
                StoreFormatError, UnknownSymbolError)
MODE_ERRORS = (PromptError, LlmPromptError)


class InputError(Exception):
    pass


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
                    encoding="utf-8")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


# ------------------------------------------------------------------ commands

def cmd_gradcheck(cfg: dict, run: RunDir, args) -> int:
    from .gradsuite import BLOCKS, run_suite

    only = [b for part in (args.only or []) for b in part.split(",") if b]
    unknown = [b for b in only if b not in BLOCKS]
    if unknown:
        raise InputError(f"unknown block(s) {', '.join(unknown)}; choose from {', '.join(BLOCKS)}")
    results = run_suite(only or None, seed=cfg["seed"])
    for r in results:
        print(f"{r.name:10s} max_rel_error={r.max_rel_error:.3e} tol={r.tolerance:.0e} "
              f"{'ok' if r.passed else 'FAIL'}")
    _write_json(run.reports / "gradcheck.json",
                [{"block": r.name, "max_rel_error": r.max_rel_error, "tolerance": r.tolerance,
                  "passed": r.passed} for r in results])
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("gradient check failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_synth_data(cfg: dict, run: RunDir, args) -> int:
    s = cfg["synth"]
    waves, records = synth_dataset(cfg["seed"], s["n"], cfg["data"]["chars"], s["min_len"], s["max_len"])
    out = Path(args.out) if args.out else run.data / "manifest.jsonl"
    if s["write_wav"]:
        wav_dir = out.parent / "wav"
        for r in records:
            write_wav(wav_dir / f"{r.id}.wav", waves[r.id])
            r.audio = str((wav_dir / f"{r.id}.wav").relative_to(out.parent))
    write_manifest(out, records)
    print(f"wrote {len(records)} records to {out}")
    return EXIT_OK


def cmd_train_encoder(cfg: dict, run: RunDir, args) -> int:
    from .encoder import train_encoder

    records = recipe.load_records(cfg, run, args.manifest)
    waves = recipe.load_waveforms(cfg, run, records, args.manifest)
    resume = _resume_path(args.resume, run.checkpoints / "encoder_last.gspc")
    res = train_encoder(recipe.encoder_config(cfg), waves, records, recipe.alphabet(cfg),
                        recipe.encoder_train_config(cfg), checkpoint_dir=run.checkpoints,
                        log_path=run.logs / "encoder_train.csv", resume=resume,
                        keep_epoch_checkpoints=cfg["encoder_train"]["keep_epoch_checkpoints"])
    res.params.save(run.encoder_ckpt)
    last = res.log_rows[-1] if res.log_rows else {}
    print(f"encoder: {res.steps_done} steps, final loss_final={last.get('loss_final', float('nan')):.4f}")
    return EXIT_OK


def _resume_path(flag, default: Path) -> Path | None:
    if flag is None:
        return None
    path = default if flag == "" else Path(flag)
    if not path.exists():
        raise FileNotFoundError(f"resume checkpoint not found: {path}")
    return path


def _load_llm(cfg: dict, run: RunDir, train_if_missing: bool):
    """Load the frozen text LLM base, pretraining it once if absent."""
    from .llm import CharTokenizer
    from .speech_llm import pretrain_text_llm

    if run.llm_ckpt.exists() and run.vocab.exists():
        tok = CharTokenizer.load(run.vocab)
        return tok, recipe.llm_config(cfg, len(tok)), NamedTensorStore.load(run.llm_ckpt)
    if not train_if_missing:
        raise FileNotFoundError(f"LLM base checkpoint not found: {run.llm_ckpt}")
    tok = recipe.build_tokenizer(cfg)
    lcfg = recipe.llm_config(cfg, len(tok))
    params, rows = pretrain_text_llm(lcfg, tok, recipe.copy_example_sampler(cfg),
                                     recipe.text_train_config(cfg),
                                     log_every=cfg["llm_pretrain"]["log_every"])
    from .encoder import write_train_log
    write_train_log(run.logs / "llm_pretrain.csv", rows, ["step", "lr", "loss"])
    tok.save(run.vocab)
    params.save(run.llm_ckpt)
    return tok, lcfg, params


def _speech_model(cfg: dict, run: RunDir, with_adapter: bool, train_llm: bool = False):
    from .adapter import init_adapter
    from .speech_llm import SpeechModel

    if not run.encoder_ckpt.exists():
        raise FileNotFoundError(f"encoder checkpoint not found: {run.encoder_ckpt}")
    tok, lcfg, llm = _load_llm(cfg, run, train_llm)
    enc = NamedTensorStore.load(run.encoder_ckpt)
    qcfg = recipe.adapter_config(cfg)
    kind = cfg["adapter"]["kind"]
    adapter, lora = init_adapter(kind, qcfg, cfg["seed"]), None
    if with_adapter:
        if not run.adapter_ckpt.exists():
            raise FileNotFoundError(f"adapter checkpoint not found: {run.adapter_ckpt}")
        ck = NamedTensorStore.load(run.adapter_ckpt)
        adapter, lora = ck.subset("adapter."), ck.subset("lora.")
    return SpeechModel(tok, lcfg, llm, recipe.lora_config(cfg), lora, recipe.encoder_config(cfg), enc,
                       kind, qcfg, adapter)


def cmd_train_adapter(cfg: dict, run: RunDir, args) -> int:
    from .speech_llm import train_adapter_and_lora

    records = recipe.load_records(cfg, run, args.manifest)
    waves = recipe.load_waveforms(cfg, run, records, args.manifest)
    model = _speech_model(cfg, run, with_adapter=False, train_llm=True)
    enc_hash = model.enc_params.digest()
    file_hash_before = NamedTensorStore.load(run.encoder_ckpt).digest()
    resume = _resume_path(args.resume, run.checkpoints / "adapter_last.gspc")
    res = train_adapter_and_lora(model, waves, records, lambda r, rng: recipe.speech_example(cfg, r, rng),
                                 recipe.adapter_train_config(cfg), checkpoint_dir=run.checkpoints,
                                 log_path=run.logs / "adapter_train.csv", resume=resume)
    out = res.adapter_params.copy()
    out.update_from(res.lora_params)
    out.save(run.adapter_ckpt)
    file_hash_after = NamedTensorStore.load(run.encoder_ckpt).digest()
    _write_json(run.reports / "train_adapter.json", {
        "steps": res.steps_done, "encoder_digest_before": file_hash_before,
        "encoder_digest_after": file_hash_after, "encoder_unchanged": file_hash_before == file_hash_after
        and enc_hash == file_hash_before, "final_loss": res.log_rows[-1]["loss"] if res.log_rows else None,
    })
    print(f"adapter: {res.steps_done} steps, final loss="
          f"{res.log_rows[-1]['loss'] if res.log_rows else float('nan'):.4f}")
    return EXIT_OK


def cmd_decode(cfg: dict, run: RunDir, args) -> int:
    from .llm import generate

    gen = recipe.generation_config(cfg)
    system = recipe.system_prompt(cfg)
    if args.text is not None:
        if AUDIO in args.text and args.audio is None:
            raise LlmPromptError("audio placeholder without audio")
        if args.audio is None:
            tok, lcfg, llm = _load_llm(cfg, run, train_if_missing=False)
            from .speech_llm import prompt_tokens
            toks, score = generate(lcfg, llm, prompt_tokens(tok, system, args.text), gen)
            text = tok.decode(toks)
            print(text)
            _write_json(run.reports / "text_decode.json", {"prompt": args.text, "output": text,
                                                           "score": score})
            return EXIT_OK
    user = args.text if args.text is not None else cfg["prompt"]["user"].format(audio=AUDIO)
    model = _speech_model(cfg, run, with_adapter=True)
    if args.audio is not None:
        if AUDIO not in user:
            raise LlmPromptError("audio supplied but the prompt has no placeholder")
        text, score = model.generate(system, user, read_wav(args.audio), gen)
        print(text)
        _write_json(run.reports / "audio_decode.json", {"audio": str(args.audio), "output": text,
                                                        "score": score})
        return EXIT_OK
    records = recipe.load_records(cfg, run, args.manifest)
    waves = recipe.load_waveforms(cfg, run, records, args.manifest)
    rows = []
    bs = cfg["generation"]["batch_size"]
    for start in range(0, len(records), bs):
        for r in records[start:start + bs]:
            hyp, score = model.generate(system, user, waves[r.id], gen)
            ref = r.translation if r.task == "ast" else r.text
            rows.append({"id": r.id, "task": r.task, "reference": ref, "hypothesis": hyp, "score": score})
    _write_hypotheses(run.reports / "hypotheses.jsonl", rows)
    report = decode_report(rows)
    _write_json(run.reports / "decode_report.json", report)
    print(f"decoded {report['n']} utterances: exact_match={report['exact_match']:.4f} "
          f"wer={report['wer']:.4f} cer={report['cer']:.4f}")
    return EXIT_OK


def _write_hypotheses(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def decode_report(rows: list[dict]) -> dict:
    refs = [r["reference"] for r in rows]
    hyps = [r["hypothesis"] for r in rows]
    words = sum(len(af.normalize(x).split()) for x in refs)
    chars = sum(len(af.normalize(x)) for x in refs)
    werr = sum(af.levenshtein(af.normalize(a).split(), af.normalize(b).split()) for a, b in zip(refs, hyps))
    cerr = sum(af.levenshtein(af.normalize(a), af.normalize(b)) for a, b in zip(refs, hyps))
    report = {"n": len(rows), "exact_match": sum(a == b for a, b in zip(refs, hyps)) / max(1, len(rows)),
              "wer": werr / max(1, words), "cer": cerr / max(1, chars)}
    ast = [r for r in rows if r["task"] == "ast"]
    if ast:
        report["bleu"] = af.bleu([r["reference"] for r in ast], [r["hypothesis"] for r in ast])
    return report


def cmd_filter_ast(cfg: dict, run: RunDir, args) -> int:
    f = cfg["filter"]
    if not f["input"]:
        raise InputError("filter-ast needs --input PAIRS.jsonl")
    if not Path(f["input"]).exists():
        raise FileNotFoundError(f"input not found: {f['input']}")
    pairs = af.read_pairs(f["input"])
    spec = af.FilterSpec(f["metric"], float(f["threshold"]), f["normalize"], f["bleu_tokenize"])
    values = af.pair_metrics(pairs, spec)
    kept, stats = af.filter_pairs(pairs, spec, values)
    af.write_pairs(run.reports / "filtered_pairs.jsonl", kept)
    if kept and all(p.audio and p.duration_s and p.tgt_lang for p in kept):
        af.write_filtered_manifest(run.reports / "filtered_manifest.jsonl", kept)
    bias = af.length_bias_report(pairs, spec)
    _write_json(run.reports / "filter_stats.json", {"stats": asdict(stats), "length_bias": asdict(bias)})
    if f["curve"]:
        af.write_curve_csv(run.reports / "selection_curve.csv", af.selection_curve(pairs, spec))
    print(f"kept {stats.kept}/{stats.total} pairs ({stats.kept_fraction:.3f}) with "
          f"{spec.metric} {'>=' if spec.higher_is_better else '<='} {spec.threshold}")
    return EXIT_OK


def cmd_plan(cfg: dict, run: RunDir, args) -> int:
    p = cfg["plan"]
    corpora = p["corpora"] or TABLE1_HOURS
    if not isinstance(corpora, dict) or not corpora:
        raise ConfigError("plan.corpora must map corpus names to sizes")
    names = list(corpora)
    rows = distribution_rows(names, [float(corpora[n]) for n in names], [float(a) for a in p["alphas"]])
    write_distribution_csv(run.reports / "distribution.csv", rows)
    msg = f"distribution for {len(names)} corpora x {len(p['alphas'])} alphas"
    if args.manifest or cfg["data"]["manifest"]:
        records = recipe.load_records(cfg, run, args.manifest)
        plan = epoch_batches(records, min(p["num_parts"], len(records)), p["batch_size"], cfg["seed"])
        write_batch_plan_csv(run.reports / "batch_plan.csv", plan, records)
        msg += f"; {len(plan.batches)} batches"
    print(msg)
    return EXIT_OK


COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "synth-data": cmd_synth_data,
    "train-encoder": cmd_train_encoder,
    "train-adapter": cmd_train_adapter,
    "decode": cmd_decode,
    "filter-ast": cmd_filter_ast,
    "plan": cmd_plan,
}


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--name", help="run name (directory under runs_dir)")
    common.add_argument("--runs-dir", help="root of run directories")
    common.add_argument("--seed", type=int)
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. --set adapter_train.steps=600")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="gspeech", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--only", action="append", help="block name(s), comma separated")

    p = sub.add_parser("synth-data", parents=[common], help="write a synthetic tone manifest")
    p.add_argument("--n", type=int)
    p.add_argument("--out", help="manifest path (default runs/<name>/data/manifest.jsonl)")
    p.add_argument("--wav", action="store_true", help="also write WAV files")

    for name in ("train-encoder", "train-adapter"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--manifest")
        p.add_argument("--steps", type=int)
        p.add_argument("--resume", nargs="?", const="", default=None, metavar="CHECKPOINT",
                       help="resume from the last (or given) checkpoint")

    p = sub.add_parser("decode", parents=[common], help="speech or text generation")
    p.add_argument("--manifest")
    p.add_argument("--audio", help="single WAV file")
    p.add_argument("--text", help="user prompt; text mode unless --audio is given")
    p.add_argument("--beam", type=int)

    p = sub.add_parser("filter-ast", parents=[common], help="agreement filtering of MT pairs")
    p.add_argument("--input")
    p.add_argument("--metric", choices=af.METRICS)
    p.add_argument("--threshold", type=float)
    p.add_argument("--curve", action="store_true")

    p = sub.add_parser("plan", parents=[common], help="sampling distribution and batch plan CSVs")
    p.add_argument("--alpha", help="comma-separated alpha values")
    p.add_argument("--manifest")
    return parser


def _overrides(args) -> dict:
    o: dict = {}
    for flag, key in (("name", "name"), ("runs_dir", "runs_dir"), ("seed", "seed")):
        if getattr(args, flag, None) is not None:
            o[key] = getattr(args, flag)
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        set_dotted(o, k, _parse_value(v))
    cmd = args.command
    if cmd == "synth-data" and args.n is not None:
        set_dotted(o, "synth.n", args.n)
    if cmd == "synth-data" and args.wav:
        set_dotted(o, "synth.write_wav", True)
    if cmd in ("train-encoder", "train-adapter") and args.steps is not None:
        set_dotted(o, ("encoder_train" if cmd == "train-encoder" else "adapter_train") + ".steps", args.steps)
    if cmd == "decode" and args.beam is not None:
        set_dotted(o, "generation.beam_size", args.beam)
    if cmd == "filter-ast":
        for flag in ("input", "metric", "threshold"):
            if getattr(args, flag) is not None:
                set_dotted(o, f"filter.{flag}", getattr(args, flag))
        if args.curve:
            set_dotted(o, "filter.curve", True)
    if cmd == "plan" and args.alpha is not None:
        try:
            set_dotted(o, "plan.alphas", [float(a) for a in args.alpha.split(",") if a.strip()])
        except ValueError:
            raise ConfigError(f"bad --alpha list {args.alpha!r}") from None
    return o


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        file_cfg = load_config_file(args.config) if args.config else None
        cfg = resolve_config(file_cfg, _overrides(args))
        run = RunDir(cfg).create()
        run.write_config(cfg)
        log.info("resolved config: %s", json.dumps(cfg, sort_keys=True))
        return COMMANDS[args.command](cfg, run, args)
    except InputError as e:
        parser.print_usage(sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except MODE_ERRORS as e:
        print(f"mode error: {e}", file=sys.stderr)
        return EXIT_MODE
    except INPUT_ERRORS as e:
        print(f"input error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
