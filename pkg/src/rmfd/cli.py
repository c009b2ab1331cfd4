"""Command-line entry point: gen-data / train / eval / ablate / report / gradcheck.

Every run directory receives exactly one ``run.json`` manifest recording the
command, config hash, corpus hash, seed, timestamps, and a content hash of
the outputs.  Logs go to stderr; machine-readable results go to files.

Exit codes: 0 success, 1 usage error, 2 validation/integrity error,
3 numeric error.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
import time
from pathlib import Path

from .errors import NumericError, RmfdError, UsageError


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _sha256_files(paths) -> str:
    digest = hashlib.sha256()
    for path in sorted(str(p) for p in paths):
        p = Path(path)
        if p.is_file():
            digest.update(p.name.encode())
            digest.update(p.read_bytes())
    return digest.hexdigest()


def _write_run_manifest(
    out_dir: Path,
    command: str,
    config_path: str | None,
    config_hash: str,
    corpus_hash_value: str | None,
    seed: int,
    started: float,
    output_paths,
) -> None:
    manifest = {
        "command": command,
        "config_path": config_path,
        "config_hash": config_hash,
        "corpus_hash": corpus_hash_value,
        "seed": seed,
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(started)),
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
        "output_hash": _sha256_files(output_paths),
    }
    (out_dir / "run.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))


def _load_corpus(data_dir: str):
    from .data_model import parse_manifest

    data = Path(data_dir)
    manifest = data / "manifest.jsonl"
    if not manifest.is_file():
        raise UsageError(f"no manifest.jsonl under {data_dir}")
    return parse_manifest(manifest.read_bytes(), base_dir=data)


def _cmd_gen_data(args) -> int:
    from .synthetic import GenConfig, build_corpus
    from .training import corpus_hash

    started = time.time()
    if args.config:
        text = Path(args.config).read_text()
        config = GenConfig.from_json(text)
    else:
        config = GenConfig()
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    out = Path(args.out)
    result = build_corpus(config, out_dir=out)
    chash = corpus_hash(result.corpus)
    _log(
        f"generated {len(result.corpus.shots)} shots "
        f"({len(result.corpus.identity_roster)} identities) -> {out}"
    )
    _write_run_manifest(
        out, "gen-data", args.config, _sha256_bytes(config.to_json().encode()),
        chash, config.seed, started,
        [out / "manifest.jsonl", out / "gen_report.json", out / "gen_config.json"],
    )
    return 0


def _cmd_train(args) -> int:
    from .training import TrainConfig, corpus_hash, fit

    started = time.time()
    if args.config:
        config = TrainConfig.from_json(Path(args.config).read_text())
    else:
        config = TrainConfig()
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    corpus = _load_corpus(args.data)
    run = Path(args.out)
    run.mkdir(parents=True, exist_ok=True)
    (run / "train_config.json").write_text(config.to_json())
    (run / "data_dir.txt").write_text(str(Path(args.data).resolve()))
    report = fit(config, corpus, run_dir=run, log=_log)
    _log(
        f"training done: best val AUC {report.best_val_auc:.4f} "
        f"at step {report.best_step}"
    )
    _write_run_manifest(
        run, "train", args.config, _sha256_bytes(config.to_json().encode()),
        report.corpus_hash, config.seed, started,
        [run / "checkpoint_best.bin", run / "checkpoint_final.bin",
         run / "losses.json", run / "val_history.json"],
    )
    return 0


def _cmd_eval(args) -> int:
    from .reference import build_reference_index
    from .metrics import evaluate_model
    from .training import TrainConfig, load_checkpoint

    started = time.time()
    run = Path(args.run)
    which = args.which
    ckpt = run / f"checkpoint_{which}.bin"
    if not ckpt.is_file():
        raise UsageError(f"no checkpoint at {ckpt}")
    model, meta = load_checkpoint(ckpt)
    config = TrainConfig.from_json(json.dumps(meta["train_config"]))
    data_dir = args.data or (run / "data_dir.txt").read_text().strip()
    corpus = _load_corpus(data_dir)
    index = (
        build_reference_index(corpus, model, config.modality_subset)
        if config.alpha != 0.0
        else None
    )
    report = evaluate_model(
        model, corpus, args.split, index,
        alpha=config.alpha, subset=config.modality_subset,
    )
    out_path = run / f"metrics_{args.split}_{which}.json"
    out_path.write_text(report.to_json())
    _log(f"{args.split}: {report.to_json()}")
    _write_run_manifest(
        run, "eval", None, _sha256_bytes(config.to_json().encode()),
        meta.get("corpus_hash"), config.seed, started, [out_path],
    )
    return 0


def _cmd_ablate(args) -> int:
    from .metrics import VARIANT_NAMES, render_table, run_ablation
    from .training import TrainConfig, corpus_hash

    started = time.time()
    if args.config:
        config = TrainConfig.from_json(Path(args.config).read_text())
    else:
        config = TrainConfig()
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    if args.variants == "all":
        variants = VARIANT_NAMES
    else:
        variants = tuple(v.strip() for v in args.variants.split(",") if v.strip())
    corpus = _load_corpus(args.data)
    run = Path(args.out)
    run.mkdir(parents=True, exist_ok=True)
    table = run_ablation(config, corpus, variants, log=_log)
    (run / "ablation.json").write_text(table.to_json())
    text = render_table(table)
    (run / "ablation.txt").write_text(text + "\n")
    print(text)
    _write_run_manifest(
        run, "ablate", args.config, _sha256_bytes(config.to_json().encode()),
        corpus_hash(corpus), config.seed, started,
        [run / "ablation.json", run / "ablation.txt"],
    )
    return 0


def _cmd_report(args) -> int:
    from .metrics import AblationTable, MetricsReport, render_table

    run = Path(args.run)
    found = False
    ablation = run / "ablation.json"
    if ablation.is_file():
        raw = json.loads(ablation.read_text())
        table = AblationTable(
            rows={k: MetricsReport(**v) for k, v in raw["rows"].items()},
            configs=raw.get("configs", {}),
        )
        print(render_table(table))
        found = True
    for metrics_file in sorted(run.glob("metrics_*.json")):
        print(f"{metrics_file.name}: {metrics_file.read_text().strip()}")
        found = True
    if not found:
        raise UsageError(f"no reports found under {run}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(corrupt=args.corrupt, log=_log)
    failures = [r for r in results if not r.passed]
    print(
        f"gradcheck: {len(results) - len(failures)}/{len(results)} components ok"
    )
    if failures:
        raise NumericError(
            f"{len(failures)} gradient checks failed (worst "
            f"{max(f.rel_error for f in failures):.2e})"
        )
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rmfd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--config", help="GenConfig JSON path")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--config", help="TrainConfig JSON path")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained run on a split")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--split", default="test")
    p.add_argument("--which", default="best", choices=("best", "final"))
    p.add_argument("--data", default=None, help="override corpus directory")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate ablation variants")
    p.add_argument("--config", help="TrainConfig JSON path")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variants", default="all", help='"all" or a comma list')
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=_cmd_ablate)

    p = sub.add_parser("report", help="render stored reports")
    p.add_argument("--run", required=True)
    p.set_defaults(fn=_cmd_report)

    p = sub.add_parser("gradcheck", help="run finite-difference gradient suites")
    p.add_argument(
        "--corrupt", action="store_true",
        help="deliberately corrupt analytic gradients (harness self-test)",
    )
    p.set_defaults(fn=_cmd_gradcheck)

    return parser


def dispatch(argv) -> int:
    """Parse argv and run one subcommand, mapping errors to exit codes."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except RmfdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
