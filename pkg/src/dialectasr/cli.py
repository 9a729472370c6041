"""Command-line entry point.

Every option can also be given in a JSON or YAML file passed with
``--config``; command-line flags override file values.  Exit codes: 0 on
success, 2 for configuration errors, 3 for data errors, 4 for runtime
failures.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, List

import yaml

from . import blocks, corpus, ctc, lm as lm_mod, metrics, segmentation, vocab as vocab_mod
from .interctc import PLACEMENT_PRESETS

logger = logging.getLogger("dialectasr")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


class CliConfigError(ValueError):
    pass


# command -> option -> (default, type, help); None default marks a required option
OPTIONS: Dict[str, Dict[str, tuple]] = {
    "generate": {
        "out": (None, str, "output corpus directory"),
        "seed": (0, int, "generator seed"),
        "speakers": (10, int, "speakers per dialect"),
        "utterances": (200, int, "utterances per speaker"),
        "vocab_size": (50, int, "base vocabulary size"),
        "feat_dim": (16, int, "feature dimension"),
        "p_lex": (0.5, float, "probability of applying a dialect word variant"),
        "no_dialect_cues": (False, bool, "zero lexical, acoustic, speaker and duration cues"),
        "lm_sentences": (6000, int, "sentences per LM text file"),
        "streams": (0, int, "long concatenated streams for alignment"),
        "utts_per_stream": (10, int, "utterances per stream"),
    },
    "train": {
        "data": (None, str, "corpus directory"),
        "out": (None, str, "output model directory"),
        "preset": ("row6_mt69_did3", str, "InterCTC tap preset name or JSON tap list"),
        "variant": ("conformer_lite", str, "encoder variant"),
        "steps": (2000, int, "training steps"),
        "batch_size": (32, int, "utterances per step"),
        "peak_lr": (2e-3, float, "peak learning rate"),
        "warmup": (200, int, "warmup steps"),
        "seed": (0, int, "training seed"),
        "no_augment": (False, bool, "disable speed perturbation and SpecAugment"),
    },
    "decode": {
        "model": (None, str, "model directory"),
        "data": (None, str, "corpus directory"),
        "out": (None, str, "output decode JSONL"),
        "split": ("test", str, "split to decode"),
        "limit": (0, int, "decode only the first N utterances (0 = all)"),
        "beam": (10, int, "beam size"),
        "ctc_weight": (0.3, float, "CTC weight in joint decoding"),
        "lm": ("", str, "LM directory for shallow fusion"),
        "lm_weight": (0.3, float, "shallow-fusion weight"),
        "length_bonus": (0.0, float, "per-token score bonus"),
        "force_tag_first": (False, bool, "restrict the first token to a dialect tag"),
    },
    "align": {
        "model": (None, str, "model directory"),
        "features": (None, str, "FEAT1 feature file of the stream"),
        "text": (None, str, "utterance texts, one per line, optionally 'id<TAB>text'"),
        "out": (None, str, "output segments JSONL"),
        "threshold": (0.0, float, "minimum confidence to keep a segment"),
        "window": (3, int, "confidence window in tokens"),
        "max_frames": (6000, int, "partition size in encoder frames"),
        "overlap": (10, int, "partition overlap in encoder frames"),
    },
    "lm-train": {
        "text": (None, str, "plain text corpus"),
        "vocab": (None, str, "vocabulary file (with dialect tags)"),
        "out": (None, str, "output LM directory"),
        "steps": (400, int, "training steps"),
        "batch_size": (32, int, "sentences per step"),
        "peak_lr": (2e-3, float, "peak learning rate"),
        "seed": (0, int, "seed"),
    },
    "lm-finetune": {
        "lm": (None, str, "stage-1 LM directory"),
        "text": (None, str, "tagged text corpus"),
        "out": (None, str, "output LM directory"),
        "steps": (400, int, "training steps"),
        "peak_lr": (1e-3, float, "peak learning rate"),
        "seed": (1, int, "seed"),
    },
    "eval": {
        "decode": (None, str, "decode JSONL"),
        "out": ("", str, "optional report JSON"),
    },
    "sweep": {
        "data": (None, str, "corpus directory"),
        "out": (None, str, "output directory"),
        "presets": (",".join(PLACEMENT_PRESETS), str, "comma-separated preset names"),
        "variants": ("conformer_lite", str, "comma-separated encoder variants"),
        "seeds": ("0", str, "comma-separated seeds"),
        "steps": (2000, int, "training steps per run"),
        "eval_limit": (0, int, "evaluate on the first N utterances (0 = all)"),
        "beam": (5, int, "beam size for evaluation"),
        "workers": (1, int, "runs executed concurrently"),
    },
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dialectasr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, opts in OPTIONS.items():
        p = sub.add_parser(cmd)
        p.add_argument("--config", help="JSON or YAML file with option values")
        p.add_argument("--log-level", default="INFO", help="logging level")
        for name, (default, typ, help_) in opts.items():
            flag = "--" + name.replace("_", "-")
            suffix = " (required)" if default is None else f" (default: {default})"
            if typ is bool:
                p.add_argument(flag, dest=name, action="store_const", const=True, default=None, help=help_ + suffix)
            else:
                p.add_argument(flag, dest=name, type=typ, default=None, help=help_ + suffix)
    return parser


def resolve(command: str, args: argparse.Namespace) -> Dict[str, Any]:
    """Defaults, then config file, then explicit flags."""
    opts = OPTIONS[command]
    values = {k: v[0] for k, v in opts.items()}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise CliConfigError(f"config: file {path} not found")
        loaded = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        if not isinstance(loaded, dict):
            raise CliConfigError("config: top level must be a mapping")
        for key, val in loaded.items():
            name = key.replace("-", "_")
            if name not in opts:
                raise CliConfigError(f"config: unknown key {key!r} for command {command}")
            typ = opts[name][1]
            try:
                values[name] = typ(val) if val is not None else None
            except (TypeError, ValueError):
                raise CliConfigError(f"config: key {key!r} expects {typ.__name__}") from None
    for name in opts:
        v = getattr(args, name)
        if v is not None:
            values[name] = v
    missing = [k for k, v in values.items() if v is None]
    if missing:
        raise CliConfigError(f"missing required option(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")
    return values


def _csv(s: str) -> List[str]:
    return [x.strip() for x in s.split(",") if x.strip()]


def cmd_generate(o: Dict[str, Any]) -> int:
    from .pipeline import prepare_corpus

    kw = dict(seed=o["seed"], speakers_per_dialect=o["speakers"], utterances_per_speaker=o["utterances"],
              vocab_size=o["vocab_size"], feat_dim=o["feat_dim"], p_lex=o["p_lex"])
    cfg = corpus.SynthConfig.no_dialect_cues(**{k: v for k, v in kw.items() if k != "p_lex"}) if o["no_dialect_cues"] else corpus.SynthConfig(**kw)
    counts = prepare_corpus(o["out"], cfg, o["lm_sentences"])
    if o["streams"]:
        write_streams(Path(o["out"]) / "streams", cfg, o["streams"], o["utts_per_stream"])
    print(json.dumps(counts))
    return EXIT_OK


def write_streams(out: Path, cfg: "corpus.SynthConfig", n: int, per_stream: int, seed: int = 0) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(corpus.generate_streams(cfg, n, per_stream, seed=seed)):
        corpus.write_features(out / f"stream{i:03d}.feat", s.features)
        lines = [f"stream{i:03d}-u{k:02d}\t{' '.join(w)}" for k, w in enumerate(s.words)]
        (out / f"stream{i:03d}.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        truth = {"boundaries": s.boundaries, "dialects": s.dialects}
        (out / f"stream{i:03d}.truth.json").write_text(json.dumps(truth), encoding="utf-8")


def cmd_train(o: Dict[str, Any]) -> int:
    import torch

    from .model import HybridModel
    from .pipeline import RunSpec, load_split, write_jsonl
    from .train import TrainConfig, train_model

    tcfg = TrainConfig(steps=o["steps"], batch_size=o["batch_size"], peak_lr=o["peak_lr"], warmup=o["warmup"], seed=o["seed"])
    if o["no_augment"]:
        tcfg.speed_factors, tcfg.time_masks, tcfg.freq_masks = (1.0,), 0, 0
    if o["preset"] not in PLACEMENT_PRESETS and not o["preset"].lstrip().startswith("["):
        raise CliConfigError(f"preset: unknown preset {o['preset']!r}")
    spec = RunSpec(preset=o["preset"], variant=o["variant"], seed=o["seed"], train=tcfg)
    mcfg = spec.model_config()
    mcfg.validate()
    vocab = vocab_mod.Vocabulary.load(Path(o["data"]) / "vocab.txt")
    data = load_split(o["data"], "train", vocab)
    torch.manual_seed(o["seed"])
    model = HybridModel(mcfg, vocab)
    result = train_model(model, data, tcfg)
    model.save(o["out"])
    write_jsonl(Path(o["out"]) / "train_log.jsonl", [asdict(s) for s in result.log])
    print(json.dumps({"steps": len(result.log), "final_loss": result.log[-1].total if result.log else None,
                      "seconds": result.seconds}))
    return EXIT_OK


def cmd_decode(o: Dict[str, Any]) -> int:
    from .decoding import BeamConfig
    from .model import HybridModel
    from .pipeline import load_split, write_jsonl
    from .train import decode_utterances

    model = HybridModel.load(o["model"])
    data = load_split(o["data"], o["split"], model.vocab, o["limit"] or None)
    lm = lm_mod.TransformerLM.load(o["lm"]) if o["lm"] else None
    beam = BeamConfig(beam=o["beam"], ctc_weight=o["ctc_weight"], lm_weight=o["lm_weight"] if lm else 0.0,
                      length_bonus=o["length_bonus"], force_tag_first=o["force_tag_first"])
    try:
        beam.validate()
    except ValueError as exc:
        raise CliConfigError(f"beam: {exc}") from None
    records = [r.to_json() for r in decode_utterances(model, data, beam, lm)]
    write_jsonl(o["out"], records)
    print(json.dumps({"utterances": len(records)}))
    return EXIT_OK


def _read_texts(path: str):
    ids, texts = [], []
    for k, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        uid, _, text = line.partition("\t") if "\t" in line else (f"utt{k:04d}", "", line)
        ids.append(uid)
        texts.append(text.split())
    return ids, texts


def cmd_align(o: Dict[str, Any]) -> int:
    from .model import HybridModel

    model = HybridModel.load(o["model"])
    feats = corpus.read_features(o["features"])
    ids, texts = _read_texts(o["text"])
    segs = segmentation.align_corpus(model, feats, texts, ids, o["threshold"], o["window"], o["max_frames"], o["overlap"])
    segmentation.write_segments(o["out"], segs)
    print(json.dumps({"segments": len(segs), "utterances": len(texts)}))
    return EXIT_OK


def cmd_lm_train(o: Dict[str, Any]) -> int:
    vocab = vocab_mod.Vocabulary.load(o["vocab"])
    text = lm_mod.TextCorpus.read(o["text"])
    cfg = lm_mod.LmConfig(steps=o["steps"], batch_size=o["batch_size"], peak_lr=o["peak_lr"], seed=o["seed"])
    model = lm_mod.train_lm(text, vocab, cfg)
    model.save(o["out"])
    seqs = lm_mod.encode_corpus(text, vocab, require_tags=False)
    print(json.dumps({"train_perplexity": lm_mod.perplexity(model, seqs)}))
    return EXIT_OK


def cmd_lm_finetune(o: Dict[str, Any]) -> int:
    model = lm_mod.TransformerLM.load(o["lm"])
    text = lm_mod.TextCorpus.read(o["text"])
    cfg = lm_mod.LmConfig(**{**asdict(model.lm_cfg), "backbone": model.lm_cfg.backbone,
                             "steps": o["steps"], "peak_lr": o["peak_lr"], "seed": o["seed"]})
    lm_mod.finetune_lm(model, text, cfg)
    model.save(o["out"])
    seqs = lm_mod.encode_corpus(text, model.vocab, require_tags=True)
    print(json.dumps({"train_perplexity": lm_mod.perplexity(model, seqs)}))
    return EXIT_OK


def cmd_eval(o: Dict[str, Any]) -> int:
    from .pipeline import read_jsonl

    report = metrics.evaluate_records(read_jsonl(o["decode"]))
    summary = report.summary()
    if o["out"]:
        Path(o["out"]).write_text(json.dumps({**summary, "utterances": report.utterances}, indent=2), encoding="utf-8")
    did_tap = f"{report.did_tap:.4f}" if report.did_tap is not None else "n/a"
    print(f"WER {report.wer:.4f} ({report.edits}/{report.ref_words})  DID(tap) {did_tap}  DID(decoder) {report.did_decoder:.4f}")
    for d, w in report.wer_by_dialect.items():
        print(f"  {d}: WER {w:.4f}")
    return EXIT_OK


def cmd_sweep(o: Dict[str, Any]) -> int:
    from .decoding import BeamConfig
    from .pipeline import RunSpec, format_table, run_sweep, sweep_rows
    from .train import TrainConfig

    try:
        presets = sweep_rows(_csv(o["presets"]))
    except KeyError as exc:
        raise CliConfigError(f"presets: {exc.args[0]}") from None
    variants = _csv(o["variants"])
    for v in variants:
        blocks.EncoderConfig(variant=v).validate()
    base = RunSpec(train=TrainConfig(steps=o["steps"]), beam=BeamConfig(beam=o["beam"], lm_weight=0.0),
                   eval_limit=o["eval_limit"] or None)
    rows = run_sweep(o["data"], base, presets, variants, [int(s) for s in _csv(o["seeds"])], o["out"], o["workers"])
    print(format_table(rows))
    return EXIT_RUNTIME if any(r.get("failed") for r in rows) else EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "decode": cmd_decode,
    "align": cmd_align,
    "lm-train": cmd_lm_train,
    "lm-finetune": cmd_lm_finetune,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}

CONFIG_ERRORS = (CliConfigError, blocks.ConfigError, corpus.SynthConfigError)
DATA_ERRORS = (
    FileNotFoundError,
    json.JSONDecodeError,
    corpus.SplitError,
    lm_mod.CorpusError,
    vocab_mod.VocabularyError,
    vocab_mod.LabelError,
    ctc.CtcInfeasibleError,
    segmentation.AlignmentInfeasibleError,
    metrics.MetricError,
)


def main(argv: List[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        opts = resolve(args.command, args)
        return COMMANDS[args.command](opts)
    except CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - top-level reporter
        logger.exception("runtime failure")
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
