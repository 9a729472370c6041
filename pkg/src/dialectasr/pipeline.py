"""End-to-end experiment plumbing: corpus directory layout, one training +
evaluation run, and the InterCTC placement sweep."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .blocks import EncoderConfig
from .corpus import (
    SynthConfig,
    generate_corpus,
    generate_text_corpus,
    read_manifest,
    split_sets,
    write_manifest,
)
from .decoding import BeamConfig
from .interctc import PLACEMENT_PRESETS, TapAssignment
from .metrics import EvalReport, evaluate_records
from .model import HybridModel, ModelConfig
from .train import TrainConfig, Utterance, decode_utterances, load_utterances, train_model
from .vocab import Vocabulary, base_vocabulary, extend_vocab

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")


def prepare_corpus(out_dir: str | Path, cfg: SynthConfig, lm_sentences: int = 6000) -> Dict[str, int]:
    """Corpus directory: feats/, manifest.jsonl, {train,valid,test}.jsonl, vocab.txt and LM text files."""
    out_dir = Path(out_dir)
    records = generate_corpus(cfg, out_dir)
    parts = split_sets(records, seed=cfg.seed)
    for name, part in zip(SPLITS, parts):
        write_manifest(out_dir / f"{name}.jsonl", part)
    vocab = extend_vocab(base_vocabulary(cfg.vocab_size))
    vocab.save(out_dir / "vocab.txt")
    texts = {
        "lm_train.txt": generate_text_corpus(cfg, lm_sentences, tagged=False, seed=1),
        "lm_finetune.txt": generate_text_corpus(cfg, lm_sentences, tagged=True, seed=2),
        "lm_heldout.txt": generate_text_corpus(cfg, max(1, lm_sentences // 10), tagged=True, seed=3),
    }
    for name, lines in texts.items():
        (out_dir / name).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return {name: len(part) for name, part in zip(SPLITS, parts)}


def load_split(data_dir: str | Path, split: str, vocab: Vocabulary, limit: Optional[int] = None) -> List[Utterance]:
    """Utterances of one split; ``limit`` keeps the first N taken round-robin over dialects."""
    data_dir = Path(data_dir)
    records = read_manifest(data_dir / f"{split}.jsonl")
    if limit is not None:
        by_dialect: Dict[str, list] = {}
        for r in records:
            by_dialect.setdefault(r.dialect, []).append(r)
        queues = [by_dialect[d] for d in sorted(by_dialect)]
        records = [q[i] for i in range(max(map(len, queues), default=0)) for q in queues if i < len(q)][:limit]
    return load_utterances(records, data_dir, vocab)


@dataclass
class RunSpec:
    preset: str = "row6_mt69_did3"
    variant: str = "conformer_lite"
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    beam: BeamConfig = field(default_factory=lambda: BeamConfig(beam=5, lm_weight=0.0))
    eval_split: str = "test"
    eval_limit: Optional[int] = None
    tagged_targets: Optional[bool] = None  # None keeps the default (tagged targets)

    def model_config(self) -> ModelConfig:
        taps = PLACEMENT_PRESETS[self.preset] if self.preset in PLACEMENT_PRESETS else TapAssignment.from_json(json.loads(self.preset))
        tagged = self.tagged_targets if self.tagged_targets is not None else True
        return ModelConfig(encoder=EncoderConfig(variant=self.variant), taps=taps, tagged_targets=tagged)


@dataclass
class RunResult:
    spec: RunSpec
    report: EvalReport
    asr_curve: List[float]
    total_curve: List[float]
    train_seconds: float
    eval_seconds: float
    decode_records: List[dict]
    model: Optional[HybridModel] = None

    def summary(self) -> dict:
        return {
            "preset": self.spec.preset,
            "variant": self.spec.variant,
            "seed": self.spec.seed,
            **self.report.summary(),
            "train_seconds": self.train_seconds,
            "eval_seconds": self.eval_seconds,
        }


def run_experiment(data_dir: str | Path, spec: RunSpec, train_data: Optional[List[Utterance]] = None,
                   eval_data: Optional[List[Utterance]] = None, out_dir: str | Path | None = None) -> RunResult:
    """Train one model from scratch, decode the evaluation split and score it."""
    data_dir = Path(data_dir)
    vocab = Vocabulary.load(data_dir / "vocab.txt")
    train_data = train_data if train_data is not None else load_split(data_dir, "train", vocab)
    eval_data = eval_data if eval_data is not None else load_split(data_dir, spec.eval_split, vocab, spec.eval_limit)
    torch.manual_seed(spec.seed)
    model = HybridModel(spec.model_config(), vocab)
    tcfg = replace(spec.train, seed=spec.seed)
    result = train_model(model, train_data, tcfg)
    start = time.perf_counter()
    records = [r.to_json() for r in decode_utterances(model, eval_data, spec.beam)]
    eval_seconds = time.perf_counter() - start
    report = evaluate_records(records)
    if out_dir is not None:
        out_dir = Path(out_dir)
        model.save(out_dir / "model")
        write_jsonl(out_dir / "train_log.jsonl", [asdict(s) for s in result.log])
        write_jsonl(out_dir / "decode.jsonl", records)
        (out_dir / "report.json").write_text(json.dumps(report.summary(), indent=2), encoding="utf-8")
    return RunResult(spec, report, result.asr_curve().tolist(), [s.total for s in result.log], result.seconds,
                     eval_seconds, records, model)


def write_jsonl(path: str | Path, rows: Sequence[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows), encoding="utf-8")


def read_jsonl(path: str | Path) -> List[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


def windowed_decrease(curve: Sequence[float], steps: int = 500, window: int = 50) -> bool:
    """True when the mean over consecutive ``window``-step blocks strictly decreases in the first ``steps``."""
    x = np.asarray(curve[:steps], dtype=np.float64)
    if len(x) < steps:
        return False
    means = x.reshape(-1, window).mean(axis=1)
    return bool(np.all(np.diff(means) < 0))


def sweep_rows(presets: Sequence[str] = tuple(PLACEMENT_PRESETS)) -> List[str]:
    for p in presets:
        if p not in PLACEMENT_PRESETS:
            raise KeyError(f"unknown preset {p!r}")
    return list(presets)


def format_table(rows: Sequence[dict]) -> str:
    """Sweep text: taps, DID accuracy, overall and per-dialect WER."""
    head = f"{'#':>2}  {'Multitask':<12} {'DID':<10} {'variant':<18} {'DID Acc':>7}  {'WER':>6}  {'UL':>6}  {'CO':>6}  {'MU':>6}  {'ASR loss down':<13}"
    lines = [head, "-" * len(head)]
    for i, r in enumerate(rows, start=1):
        if r.get("failed"):
            lines.append(f"{i:>2}  {r.get('multitask', '?'):<12} {r.get('did_taps', '?'):<10} {r.get('variant', ''):<18} FAILED: {r['failed']}")
            continue
        byd = r.get("wer_by_dialect", {})
        did = r.get("did")
        lines.append(
            f"{i:>2}  {r['multitask']:<12} {r['did_taps']:<10} {r['variant']:<18} {did * 100 if did is not None else float('nan'):>6.1f}%  "
            f"{r['wer'] * 100:>5.1f}%  " + "  ".join(f"{byd.get(d, float('nan')) * 100:>5.1f}%" for d in ("UL", "CO", "MU"))
            + f"  {'yes' if r.get('asr_loss_decreasing') else 'no':<13}"
        )
    return "\n".join(lines)


def run_sweep(data_dir: str | Path, base: RunSpec, presets: Sequence[str], variants: Sequence[str], seeds: Sequence[int],
              out_dir: str | Path | None = None, workers: int = 1) -> List[dict]:
    """One run per (variant, preset, seed); failures become rows with a ``failed`` marker."""
    data_dir = Path(data_dir)
    vocab = Vocabulary.load(data_dir / "vocab.txt")
    train_data = load_split(data_dir, "train", vocab)
    eval_data = load_split(data_dir, base.eval_split, vocab, base.eval_limit)
    jobs = [replace(base, preset=p, variant=v, seed=s) for v in variants for p in presets for s in seeds]

    def one(spec: RunSpec) -> dict:
        multitask, did_taps = spec.model_config().taps.describe()
        row = {"preset": spec.preset, "variant": spec.variant, "seed": spec.seed, "multitask": multitask, "did_taps": did_taps}
        try:
            run_dir = Path(out_dir) / f"{spec.variant}-{spec.preset}-s{spec.seed}" if out_dir else None
            res = run_experiment(data_dir, spec, train_data, eval_data, run_dir)
        except Exception as exc:  # keep going; the report marks the row
            logger.exception("run %s failed", spec.preset)
            row["failed"] = f"{type(exc).__name__}: {exc}"
            return row
        row.update(res.summary())
        row["asr_loss_decreasing"] = windowed_decrease(res.asr_curve)
        row["asr_curve_50"] = [float(np.mean(res.asr_curve[i : i + 50])) for i in range(0, len(res.asr_curve), 50)]
        return row

    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_sweep_job, [(str(data_dir), j, out_dir) for j in jobs]))
    else:
        rows = [one(j) for j in jobs]
    if out_dir is not None:
        write_jsonl(Path(out_dir) / "sweep.jsonl", rows)
        (Path(out_dir) / "sweep.txt").write_text(format_table(rows) + "\n", encoding="utf-8")
    return rows


def _sweep_job(args) -> dict:
    data_dir, spec, out_dir = args
    torch.set_num_threads(1)
    return run_sweep(data_dir, spec, [spec.preset], [spec.variant], [spec.seed], None)[0]
