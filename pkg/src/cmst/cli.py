"""Command-line entry point: ``cmst {gen-data,train,evaluate,ablate,gradcheck}``.

Configuration is one JSON document. Precedence: built-in defaults, then the
``--config`` file, then explicit flags. ``--print-config`` shows the fully
resolved result. Every command writes ``run_manifest.json`` into its output
directory; a manifest can itself be passed back as ``--config``.

Exit codes: 0 ok, 2 configuration error, 3 I/O or format error,
4 training divergence, 5 gradient-check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .datagen import SyntheticConfig, generate_synthetic, load_dataset, save_dataset
from .errors import (
    CheckpointError,
    ConfigError,
    DatasetFormatError,
    DivergenceError,
    InputError,
    NumericError,
)
from .gradcheck import run_gradcheck
from .retrieval_eval import dumps_fixed
from .training import (
    STRATEGIES,
    ExperimentConfig,
    Trainer,
    load_checkpoint,
    run_experiment,
)
from .common_space import SIMILARITY_SOURCES, TRANSFER_MODES

log = logging.getLogger("cmst")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_GRADCHECK = 0, 2, 3, 4, 5

ABLATION_AXES = {
    "transfer": ("transfer", ("value", "difference", "product", "none")),
    "source": ("similarity_source", ("siamese", "euclidean", "cosine")),
    "strategy": ("strategy.variant", STRATEGIES),
}

SIMILARITY_NOTES = {
    "siamese": "squared euclidean distance between siamese embeddings",
    "euclidean": "squared euclidean distance between raw input features",
    "cosine": "1 - cosine similarity of raw input features",
}


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------- config


def _read_json(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}", EXIT_IO) from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(f"config {path} is not valid JSON: {exc}", EXIT_CONFIG) from exc
    if not isinstance(doc, dict):
        raise CliError(f"config {path} must hold a JSON object", EXIT_CONFIG)
    # a run manifest carries its resolved config
    if "command" in doc and "config" in doc:
        doc = doc["config"]
    return doc


def _set_path(doc: dict, dotted: str, value) -> None:
    *parents, leaf = dotted.split(".")
    for key in parents:
        doc = doc.setdefault(key, {})
    doc[leaf] = value


def _parse_ints(text: str, flag: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise CliError(f"{flag} expects comma-separated integers, got {text!r}", EXIT_CONFIG)
    if not values:
        raise CliError(f"{flag} needs at least one value", EXIT_CONFIG)
    return values


def _parse_truncation(text):
    """``"50"`` -> [50]; ``"none"`` -> [None]; ``"both"`` -> [50, None]."""
    if text is None:
        return None
    low = text.lower()
    if low in ("none", "full"):
        return [None]
    if low == "both":
        return [50, None]
    try:
        value = int(text)
    except ValueError:
        raise CliError(f"--truncation expects an integer, 'none' or 'both', got {text!r}",
                       EXIT_CONFIG)
    if value < 1:
        raise CliError("--truncation must be >= 1", EXIT_CONFIG)
    return [value]


def _as_synthetic(doc: dict) -> dict:
    """gen-data accepts a bare dataset section as well as a full experiment config."""
    synthetic = {f for f in SyntheticConfig.__dataclass_fields__}
    if doc and set(doc) <= synthetic:
        return {"data": doc}
    return doc


def resolve_config(args, base: dict | None = None) -> ExperimentConfig:
    doc = dict(base or {})
    if getattr(args, "config", None):
        doc = _read_json(args.config)
    if args.command == "gen-data":
        doc = _as_synthetic(doc)
    overrides = {
        "transfer": getattr(args, "transfer", None),
        "similarity_source": getattr(args, "source", None),
        "strategy.variant": getattr(args, "strategy", None),
        "epochs": getattr(args, "epochs", None),
    }
    if getattr(args, "seed", None) is not None:
        key = "data.seed" if args.command == "gen-data" else "seed"
        overrides[key] = args.seed
    if getattr(args, "data", None):
        overrides["data_path"] = str(args.data)
    for key, value in overrides.items():
        if value is not None:
            _set_path(doc, key, value)
    try:
        return ExperimentConfig.from_dict(doc)
    except ConfigError as exc:
        raise CliError(f"configuration error in field {exc.field}: {exc}", EXIT_CONFIG) from exc


# --------------------------------------------------------------------------- helpers


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc}", EXIT_IO) from exc
    return out


def _load_data(cfg: ExperimentConfig):
    if not cfg.data_path:
        return generate_synthetic(cfg.data)
    try:
        return load_dataset(cfg.data_path)
    except FileNotFoundError as exc:
        raise CliError(str(exc), EXIT_IO) from exc
    except (DatasetFormatError, OSError) as exc:
        raise CliError(f"cannot load dataset {cfg.data_path}: {exc}", EXIT_IO) from exc


def write_manifest(out: Path, args, argv, config, started, inputs, outputs, **extra) -> Path:
    manifest = {
        "command": args.command,
        "argv": list(argv),
        "tool_version": __version__,
        "seed": config.get("seed") if isinstance(config, dict) else None,
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
        "duration_s": round(time.monotonic() - started, 3),
    }
    manifest.update(extra)
    path = out / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def _experiment_notes(cfg: ExperimentConfig) -> dict:
    return {"similarity_source": SIMILARITY_NOTES[cfg.similarity_source],
            "adversarial_objective": cfg.adversarial}


# --------------------------------------------------------------------------- commands


def cmd_gen_data(args, argv) -> int:
    started = time.monotonic()
    cfg = resolve_config(args)
    out = _out_dir(args, "data")
    try:
        dataset = generate_synthetic(cfg.data)
    except ConfigError as exc:
        raise CliError(f"configuration error in field data.{exc.field}: {exc}",
                       EXIT_CONFIG) from exc
    save_dataset(dataset, out)
    write_manifest(out, args, argv, {"data": cfg.data.to_dict(), "seed": cfg.data.seed},
                   started, inputs={"config": args.config},
                   outputs={"dataset": str(out)})
    print(f"wrote {dataset.n} pairs ({dataset.n_classes} classes, d_v={dataset.d_v}, "
          f"d_t={dataset.d_t}) to {out}")
    return EXIT_OK


def cmd_train(args, argv) -> int:
    started = time.monotonic()
    resume = None
    base = None
    if args.resume:
        try:
            resume = load_checkpoint(args.resume)
        except (OSError, CheckpointError) as exc:
            raise CliError(f"cannot read checkpoint {args.resume}: {exc}", EXIT_IO) from exc
        base = resume.meta["config"]
    cfg = resolve_config(args, base)
    out = _out_dir(args, "run")
    dataset = _load_data(cfg)
    inputs = {"config": args.config, "data": cfg.data_path, "resume": args.resume}
    outputs = {name: str(out / name)
               for name in ("checkpoint.bin", "metrics.jsonl", "report.json")}
    try:
        _, _, report = run_experiment(cfg, dataset, out, resume=resume)
    except CheckpointError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    except (DivergenceError, NumericError) as exc:
        write_manifest(out, args, argv, cfg.to_dict(), started, inputs, outputs,
                       status="diverged", error=str(exc), notes=_experiment_notes(cfg))
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    write_manifest(out, args, argv, cfg.to_dict(), started, inputs, outputs,
                   status="ok", notes=_experiment_notes(cfg))
    print(report.table())
    return EXIT_OK


def cmd_evaluate(args, argv) -> int:
    started = time.monotonic()
    try:
        ckpt = load_checkpoint(args.checkpoint)
    except (OSError, CheckpointError) as exc:
        raise CliError(f"cannot read checkpoint {args.checkpoint}: {exc}", EXIT_IO) from exc
    cfg = resolve_config(args, ckpt.meta["config"])
    dataset = _load_data(cfg)
    try:
        trainer = Trainer.from_checkpoint(ckpt, dataset, cfg)
    except CheckpointError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    # evaluation-only flags stay out of the config so the checkpoint hash still matches
    ks = _parse_ints(args.ks, "--ks") if args.ks else None
    truncations = _parse_truncation(args.truncation) or [cfg.eval.truncation]
    reports = {}
    for trunc in truncations:
        label = "full" if trunc is None else f"top{trunc}"
        reports[label] = trainer.evaluate(ks, truncation=trunc).to_dict()
    doc = next(iter(reports.values())) if len(reports) == 1 else reports
    text = dumps_fixed(doc)
    out = _out_dir(args, "eval")
    (out / "report.json").write_text(text + "\n", encoding="utf-8")
    write_manifest(out, args, argv, cfg.to_dict(), started,
                   inputs={"checkpoint": args.checkpoint, "data": cfg.data_path},
                   outputs={"report": str(out / "report.json")},
                   ks=ks or cfg.eval.ks, truncations=truncations)
    print(text)
    return EXIT_OK


def cmd_ablate(args, argv) -> int:
    started = time.monotonic()
    cfg = resolve_config(args)
    out = _out_dir(args, "ablate")
    dataset = _load_data(cfg)
    seeds = _parse_ints(args.seeds, "--seeds") if args.seeds else [cfg.seed]
    field_path, arms = ABLATION_AXES[args.axis]
    base = cfg.to_dict()

    results = []
    for arm in arms:
        doc = json.loads(json.dumps(base))
        _set_path(doc, field_path, arm)
        runs, failures = [], []
        for seed in seeds:
            doc["seed"] = seed
            arm_cfg = ExperimentConfig.from_dict(doc)
            try:
                _, _, rep = run_experiment(arm_cfg, dataset, out / arm / f"seed{seed}")
            except (DivergenceError, NumericError) as exc:
                failures.append({"seed": seed, "error": str(exc)})
                log.warning("arm %s seed %d failed: %s", arm, seed, exc)
                continue
            top1 = rep.topk.get(1, (float("nan"),) * 3)
            runs.append({"seed": seed, "img2txt": rep.map_img2txt,
                         "txt2img": rep.map_txt2img, "avg": rep.map_avg, "top1_avg": top1[2]})
        row = {"arm": arm, "seeds": seeds, "runs": runs, "failures": failures,
               "status": "ok" if not failures else ("failed" if not runs else "partial")}
        if runs:
            for key in ("img2txt", "txt2img", "avg", "top1_avg"):
                row[key] = float(np.mean([r[key] for r in runs]))
        results.append(row)

    table = _ablation_table(args.axis, results)
    (out / "ablation.json").write_text(
        json.dumps({"axis": args.axis, "arms": results}, indent=2) + "\n", encoding="utf-8")
    write_manifest(out, args, argv, base, started,
                   inputs={"config": args.config, "data": cfg.data_path},
                   outputs={"ablation": str(out / "ablation.json")},
                   axis=args.axis, seeds=seeds, notes=_experiment_notes(cfg))
    print(table)
    if all(r["status"] == "failed" for r in results):
        return EXIT_DIVERGED
    return EXIT_OK


def _ablation_table(axis, results) -> str:
    lines = [f"{axis:<12} Img2txt  Txt2Img  Avg.    top-1   runs"]
    for r in results:
        ok = len(r["runs"])
        n = ok + len(r["failures"])
        if r["runs"]:
            lines.append(f"{r['arm']:<12} {r['img2txt']:.3f}    {r['txt2img']:.3f}    "
                         f"{r['avg']:.3f}   {r['top1_avg']:.3f}   {ok}/{n}")
        else:
            lines.append(f"{r['arm']:<12} FAILED                                   0/{n}")
    return "\n".join(lines)


def cmd_gradcheck(args, argv) -> int:
    started = time.monotonic()
    seed = 0 if args.seed is None else args.seed
    results = run_gradcheck(seed, args.configs, args.eps, args.tol, corrupt=args.corrupt)
    report = {"seed": seed, "configs": args.configs, "eps": args.eps, "tolerance": args.tol,
              "results": [r.to_dict() for r in results]}
    out = _out_dir(args, "gradcheck")
    (out / "gradcheck.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    write_manifest(out, args, argv, {k: v for k, v in report.items() if k != "results"},
                   started, inputs={}, outputs={"report": str(out / "gradcheck.json")})
    print(f"{'loss':<12} {'checked':>8} {'skipped':>8} {'max rel err':>12}  result")
    for r in results:
        print(f"{r.loss:<12} {r.checked:>8} {r.skipped:>8} {r.max_rel_err:>12.3e}  "
              f"{'PASS' if r.passed else 'FAIL'}")
    failed = [r.loss for r in results if not r.passed]
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cmst", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="JSON config file (or a previous run_manifest.json)")
        p.add_argument("--seed", type=int, help="override the seed")
        p.add_argument("--out", help="output directory")
        if data:
            p.add_argument("--data", help="dataset directory (default: generate in memory)")
        p.add_argument("--print-config", action="store_true",
                       help="print the fully resolved config and exit")

    def experiment_flags(p):
        p.add_argument("--transfer", choices=TRANSFER_MODES)
        p.add_argument("--strategy", choices=STRATEGIES)
        p.add_argument("--source", choices=SIMILARITY_SOURCES, help="intra-modal similarity")
        p.add_argument("--epochs", type=int, help="cross-modal training epochs")

    p = sub.add_parser("gen-data", help="generate a synthetic paired dataset")
    common(p, data=False)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train and evaluate one configuration")
    common(p)
    experiment_flags(p)
    p.add_argument("--resume", help="continue from a checkpoint.bin")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on the test split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ks", help="comma-separated k values, e.g. 1,5,10,50")
    p.add_argument("--truncation", help="mAP cut-off: an integer, 'none', or 'both'")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="compare arms of one axis over shared seeds")
    common(p)
    experiment_flags(p)
    p.add_argument("--axis", choices=sorted(ABLATION_AXES), default="transfer")
    p.add_argument("--seeds", help="comma-separated seeds (default: the config seed)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss gradient")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--configs", type=int, default=20, help="random configurations per loss")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--corrupt", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "print_config", False):
            cfg = resolve_config(args)
            print(json.dumps(cfg.to_dict(), indent=2))
            return EXIT_OK
        return args.func(args, argv)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"error: configuration error in field {exc.field}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetFormatError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
