"""Command-line entry point: ``mtplm {corrupt,pretrain,evaluate,vocab,synth-ssp3,rerun}``."""

from __future__ import annotations

import argparse
import collections
import concurrent.futures
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from . import __version__, data, kernels, model, objectives, optim, trainer, vocab
from .evalharness import head as headmod
from .evalharness import tasks

log = logging.getLogger("mtplm")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(output: str | os.PathLike, subcommand: str, argv: Sequence[str], config: dict,
                   seeds: Sequence[int], inputs: Sequence[str | os.PathLike],
                   outputs: Sequence[str | os.PathLike]) -> Path:
    path = Path(f"{output}.manifest.json")
    manifest = {
        "subcommand": subcommand,
        "argv": list(argv),
        "config": config,
        "seeds": list(seeds),
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {str(p): sha256_file(p) for p in outputs},
        "version": __version__,
        "kernel_backend": kernels.BACKEND,
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# -- corrupt ----------------------------------------------------------------

def _corrupt_one(args: tuple) -> dict:
    index, residues, cfg, seed, task = args
    residues = data.crop_to_max(residues, cfg.max_length, data.crop_rng(seed, 0, index))
    ids = vocab.residues_to_ids(residues)
    rng = np.random.default_rng([seed, 3, index])
    if task == "mixed":
        ex = objectives.make_example(ids, cfg, rng)
    elif task == "mlm":
        ex = objectives.span_corrupt(ids, objectives.sample_masking_probability(rng, cfg), cfg, rng)
    else:
        ex = objectives.sequence_completion(ids)
    return ex.to_json()


def _corrupt_chunk(chunk: list[tuple]) -> list[dict]:
    return [_corrupt_one(item) for item in chunk]


def _chunks(records, cfg, seed, task, size=256):
    chunk = []
    for i, rec in enumerate(records):
        if rec.length < 2:
            continue
        chunk.append((i, rec.residues, cfg, seed, task))
        if len(chunk) == size:
            yield chunk
            chunk = []
    if chunk:
        yield chunk


def masked_fraction(example: dict) -> float:
    masked = sum(1 for t in example["target"] if vocab.is_residue(t))
    total = masked + sum(1 for t in example["encoder"] if vocab.is_residue(t))
    return masked / total


def cmd_corrupt(args, argv) -> int:
    cfg = objectives.ObjectiveConfig(
        masking_probabilities=tuple(args.masking_probabilities),
        mean_span_length=args.mean_span_length,
        mlm_assignment_probability=args.mlm_probability,
        max_length=args.max_length,
    )
    stats_p: collections.Counter = collections.Counter()
    stats_task: collections.Counter = collections.Counter()
    fractions = []
    out = Path(args.out)
    with data.open_fasta(args.fasta) as fh, open(out, "w", encoding="utf-8") as sink:
        chunks = _chunks(data.parse_fasta(fh), cfg, args.seed, args.task)
        if args.workers > 1:
            pool = concurrent.futures.ProcessPoolExecutor(args.workers)
            results = pool.map(_corrupt_chunk, chunks)
        else:
            pool = None
            results = map(_corrupt_chunk, chunks)
        try:
            for batch in results:
                for ex in batch:
                    sink.write(json.dumps(ex) + "\n")
                    stats_task[ex["task"]] += 1
                    if ex["task"] == "mlm":
                        stats_p[str(ex["p"])] += 1
                        fractions.append(masked_fraction(ex))
        finally:
            if pool is not None:
                pool.shutdown()
    n_mlm = sum(stats_p.values())
    hist, edges = np.histogram(fractions, bins=20, range=(0.0, 1.0))
    stats = {
        "examples": sum(stats_task.values()),
        "tasks": dict(stats_task),
        "masking_probability_frequency": {p: c / n_mlm for p, c in sorted(stats_p.items())} if n_mlm else {},
        "masked_fraction_mean": float(np.mean(fractions)) if fractions else None,
        "masked_fraction_histogram": {"edges": [round(e, 2) for e in edges.tolist()], "counts": hist.tolist()},
    }
    Path(f"{out}.stats.json").write_text(json.dumps(stats, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(stats, indent=2))
    write_manifest(out, "corrupt", argv, {"objective": dataclasses.asdict(cfg), "task": args.task},
                   [args.seed], [args.fasta], [out, f"{out}.stats.json"])
    return EXIT_OK


# -- pretrain ---------------------------------------------------------------

# flat config keys, named after the hyperparameter tables
MODEL_KEYS = {
    "embedding_dim": "d_model", "encoder_layers": "num_encoder_layers",
    "decoder_layers": "num_decoder_layers", "feedforward_dim": "d_ff", "num_heads": "num_heads",
    "kv_dim": "d_kv", "relative_attention_num_buckets": "rel_attn_num_buckets",
    "relative_attention_max_distance": "rel_attn_max_distance", "vocab_size": "vocab_size",
    "tie_word_embeddings": "tie_word_embeddings",
}
FIXED_KEYS = {"num_sentinel_tokens": vocab.NUM_SENTINELS, "optimizer": "adafactor",
              "warmup_scheduler": "rsqrt_decay", "weight_decay": 0.0, "non_linearity": "swiglu"}
RUN_KEYS = {"preset", "sequence_length", "masking_probability", "mean_span_length",
            "mlm_assignment_probability", "learning_rate", "warmup_steps", "num_steps", "batch_size",
            "seed", "precision", "checkpoint_every", "layers"}

DEFAULT_RUN = {"num_steps": 1000, "checkpoint_every": 0, "seed": 0, "batch_size": 8, "sequence_length": 512,
               "masking_probability": [0.15, 0.20, 0.30], "mean_span_length": 3.0,
               "mlm_assignment_probability": 0.5, "learning_rate": 1e-2, "warmup_steps": 10_000,
               "precision": "float32"}


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid configuration:\n" + "\n".join(f"  {p}" for p in problems))
        self.problems = problems


def resolve_config(raw: dict, preset: str | None = None) -> tuple[trainer.RunConfig, dict]:
    """Validate a flat key-value document; every bad key is reported at once."""
    problems = []
    raw = dict(raw or {})
    preset = raw.pop("preset", preset) or "desk"
    if preset not in model.PRESETS:
        problems.append(f"preset: unknown {preset!r}; choose from {', '.join(model.PRESETS)}")
        preset = "desk"
    mfields = dataclasses.asdict(model.PRESETS[preset])
    run = dict(DEFAULT_RUN)
    for key, value in raw.items():
        if key in MODEL_KEYS:
            mfields[MODEL_KEYS[key]] = value
        elif key in FIXED_KEYS:
            if str(value).lower() != str(FIXED_KEYS[key]).lower() and value != FIXED_KEYS[key]:
                problems.append(f"{key}: only {FIXED_KEYS[key]!r} is supported, got {value!r}")
        elif key in RUN_KEYS:
            run[key] = value
        else:
            problems.append(f"{key}: unknown key")
    if "layers" in run and run["layers"] != mfields["num_encoder_layers"] + mfields["num_decoder_layers"]:
        problems.append("layers: must equal encoder_layers + decoder_layers")
    for key, field in MODEL_KEYS.items():
        v = mfields[field]
        if field == "tie_word_embeddings":
            if v not in (False, "no", "false"):
                problems.append(f"{key}: tied embeddings are not supported")
            mfields[field] = False
        elif not isinstance(v, int) or v < 1:
            problems.append(f"{key}: must be a positive integer, got {v!r}")
    if mfields["vocab_size"] != vocab.VOCAB_SIZE and preset != "tiny":
        problems.append(f"vocab_size: token table has {vocab.VOCAB_SIZE} entries, got {mfields['vocab_size']}")
    for key in ("num_steps", "batch_size", "sequence_length", "warmup_steps", "seed", "checkpoint_every"):
        v = run[key]
        lo = 0 if key in ("num_steps", "seed", "checkpoint_every") else 1
        if not isinstance(v, int) or isinstance(v, bool) or v < lo:
            problems.append(f"{key}: must be an integer >= {lo}, got {v!r}")
    if isinstance(run["sequence_length"], int) and run["sequence_length"] < 2:
        problems.append("sequence_length: must be >= 2")
    probs = run["masking_probability"]
    if not isinstance(probs, list):
        probs = [probs]
    if not probs or not all(isinstance(p, (int, float)) and 0 < p < 1 for p in probs):
        problems.append(f"masking_probability: values must lie in (0, 1), got {run['masking_probability']!r}")
    if not isinstance(run["mean_span_length"], (int, float)) or run["mean_span_length"] < 1:
        problems.append("mean_span_length: must be >= 1")
    if not isinstance(run["mlm_assignment_probability"], (int, float)) or not 0 <= run["mlm_assignment_probability"] <= 1:
        problems.append("mlm_assignment_probability: must lie in [0, 1]")
    if not isinstance(run["learning_rate"], (int, float)) or run["learning_rate"] <= 0:
        problems.append("learning_rate: must be positive")
    if run["precision"] not in ("float32", "float64"):
        problems.append("precision: must be float32 or float64")
    if problems:
        raise ConfigError(problems)
    try:
        cfg = trainer.RunConfig(
            model=model.ModelConfig(**mfields),
            objective=objectives.ObjectiveConfig(tuple(float(p) for p in probs), float(run["mean_span_length"]),
                                                 float(run["mlm_assignment_probability"]), run["sequence_length"]),
            schedule=optim.ScheduleConfig(float(run["learning_rate"]), run["warmup_steps"]),
            plan=data.BatchPlan(run["seed"], run["batch_size"], run["sequence_length"], 0),
            precision=run["precision"],
        )
    except ValueError as exc:
        raise ConfigError([str(exc)]) from exc
    return cfg, {"preset": preset, **run}


def cmd_pretrain(args, argv) -> int:
    raw = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, dict):
            raise ConfigError(["config file must be a flat key-value mapping"])
    for key in ("num_steps", "seed", "checkpoint_every"):
        if getattr(args, key) is not None:
            raw[key] = getattr(args, key)
    cfg, run = resolve_config(raw, args.preset)
    if args.dry_run:
        enc, dec, total = model.param_count(cfg.model)
        print(json.dumps({"preset": run["preset"], "encoder_parameters": enc, "decoder_parameters": dec,
                          "total_parameters": total, "model": cfg.model.to_dict()}, indent=2))
        return EXIT_OK
    if not args.corpus or not args.out_dir:
        raise UsageError("--corpus and --out-dir are required unless --dry-run")
    if not os.path.exists(args.corpus):
        raise FileNotFoundError(f"corpus not found: {args.corpus}")
    out = Path(args.out_dir)
    _, entries = trainer.pretrain(cfg, args.corpus, run["num_steps"], run["checkpoint_every"], out,
                                  resume=args.resume)
    if entries:
        print(json.dumps(entries[-1]))
    inputs = [args.corpus] + ([args.config] if args.config else []) + ([args.resume] if args.resume else [])
    write_manifest(out / "final.bin", "pretrain", argv, {"run": cfg.to_dict(), "resolved": run},
                   [cfg.plan.seed], inputs, [out / "final.bin", out / "loss_log.jsonl"])
    return EXIT_OK


# -- evaluate ---------------------------------------------------------------

def _seed_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers: {text!r}")


def cmd_evaluate(args, argv) -> int:
    if args.task not in headmod.TASK_KINDS:
        raise UsageError(f"unknown task kind {args.task!r}; valid kinds: {', '.join(headmod.TASK_KINDS)}")
    state = trainer.load(args.checkpoint)
    records = tasks.load_task_file(args.task_file, args.task)
    prefixes = ["NLU", "S2S"] if args.prefix == "both" else [args.prefix]
    head_cfg = headmod.HeadConfig(embedding_dim=state.config.model.d_model)
    if args.epochs is not None:
        head_cfg = dataclasses.replace(head_cfg, num_epochs=args.epochs)
    results = [tasks.run_task(state.params, state.config.model, records, args.task, p, args.seeds,
                              args.dataset or Path(args.task_file).stem, head_cfg)
               for p in prefixes]
    out = Path(args.out)
    out.write_text(json.dumps({"results": results}, indent=2) + "\n", encoding="utf-8")
    for r in results:
        for name, m in r["metrics"].items():
            print(f"{r['task']} [{r['prefix']}] {name}: {m['mean']:.4f} ± {m['std']:.4f}")
    write_manifest(out, "evaluate", argv, {"task": args.task, "prefixes": prefixes,
                                           "head": dataclasses.asdict(head_cfg)},
                   args.seeds, [args.checkpoint, args.task_file], [out])
    return EXIT_OK


def cmd_vocab(args, argv) -> int:
    text = vocab.VOCAB.dump()
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_synth_ssp3(args, argv) -> int:
    rows = tasks.synthetic_ssp3(args.n, args.seed)
    with open(args.out, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    return EXIT_OK


def cmd_rerun(args, argv) -> int:
    manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    return main(manifest["argv"])


def build_parser() -> ArgumentParser:
    p = ArgumentParser(prog="mtplm", description=__doc__)
    p.add_argument("--workers", type=int, default=1, help="worker processes for example construction")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    c = sub.add_parser("corrupt", help="build pre-training examples from a FASTA file")
    c.add_argument("fasta")
    c.add_argument("--out", required=True)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--task", choices=["mixed", "mlm", "completion"], default="mixed")
    c.add_argument("--masking-probabilities", type=lambda s: [float(x) for x in s.split(",")],
                   default=[0.15, 0.20, 0.30])
    c.add_argument("--mean-span-length", type=float, default=3.0)
    c.add_argument("--mlm-probability", type=float, default=0.5)
    c.add_argument("--max-length", type=int, default=512)
    c.set_defaults(func=cmd_corrupt)

    t = sub.add_parser("pretrain", help="run multi-task pre-training")
    t.add_argument("--config")
    t.add_argument("--corpus")
    t.add_argument("--out-dir")
    t.add_argument("--preset", choices=sorted(model.PRESETS))
    t.add_argument("--dry-run", action="store_true", help="print parameter counts and exit")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--num-steps", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_pretrain)

    e = sub.add_parser("evaluate", help="train downstream heads on frozen embeddings")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--task-file", required=True)
    e.add_argument("--task", required=True, help=f"one of: {', '.join(headmod.TASK_KINDS)}")
    e.add_argument("--prefix", choices=["NLU", "S2S", "both"], default="both")
    e.add_argument("--seeds", type=_seed_list, default=list(tasks.DEFAULT_SEEDS))
    e.add_argument("--dataset", default="")
    e.add_argument("--epochs", type=int, help="override the 20-epoch default")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    v = sub.add_parser("vocab", help="dump the token table")
    v.add_argument("--out")
    v.set_defaults(func=cmd_vocab)

    s = sub.add_parser("synth-ssp3", help="write a synthetic, residue-determined SSP3 task file")
    s.add_argument("--n", type=int, default=160)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_ssp3)

    r = sub.add_parser("rerun", help="re-execute the command recorded in a manifest")
    r.add_argument("manifest")
    r.set_defaults(func=cmd_rerun)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except (UsageError, ConfigError) as exc:
        print(f"mtplm {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, data.DataError, vocab.VocabError, objectives.ObjectiveError,
            tasks.TaskFileError, trainer.CheckpointError) as exc:
        print(f"mtplm {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
