"""Command-line entry point.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 I/O error.
Every command writes a manifest recording the resolved arguments so that
``replay --manifest`` can rerun it.
"""
import argparse
import json
import os
import sys
import time
from pathlib import Path

from . import __version__

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
OUT_ENV = "SETCOMPLEMENT_OUT"
MAX_EXHAUSTIVE_V = 8


class UsageError(Exception):
    pass


def _default_out(name: str) -> str:
    return str(Path(os.environ.get(OUT_ENV, ".")) / name)


def _manifest_path(out: str, is_dir: bool) -> Path:
    p = Path(out)
    return p / "manifest.json" if is_dir else p.with_name(p.name + ".manifest.json")


def write_manifest(path: Path, args: argparse.Namespace, seed=None, config=None) -> None:
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    manifest = {
        "command": args.command,
        "args": resolved,
        "seed": seed,
        "config": config,
        "version": __version__,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from exc


# -- commands --------------------------------------------------------------

def cmd_verify_theory(args) -> int:
    from .theory import EnumerationBudgetError, to_jsonable, verify_hardcoded

    if args.v < 2:
        raise UsageError("--v must be at least 2")
    if args.v > args.max_v:
        raise UsageError(f"v={args.v} exceeds the exhaustive cap {args.max_v} (raise --max-v to override)")
    try:
        report = verify_hardcoded(args.v, args.C, args.norm, eq_tol=args.eq_tol, tau=args.tau)
    except EnumerationBudgetError as exc:
        raise UsageError(str(exc)) from exc
    text = json.dumps(to_jsonable(report), indent=2)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
        write_manifest(_manifest_path(args.out, False), args, config={"v": args.v, "C": args.C, "norm": args.norm})
    else:
        print(text)
    status = "PASS" if report["passed"] else "FAIL"
    print(f"verify-theory v={args.v} C={args.C} norm={args.norm}: {status} {report['checks']}", file=sys.stderr)
    return EXIT_OK if report["passed"] else EXIT_FAIL


def _bema_filename(key: str) -> str:
    return "bema_" + key.replace("|", "_") + ".ckpt"


def cmd_train(args) -> int:
    from .model import save_checkpoint
    from .training import TrainRunConfig, Trainer, train_run

    try:
        config = TrainRunConfig.from_dict(_read_json(args.config))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad run config: {exc}") from exc
    out = Path(args.out or _default_out("run"))
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / "manifest.json", args, seed=config.seed, config=config.to_dict())
    trainer = Trainer(config)
    with open(out / "metrics.jsonl", "w") as fh:
        def sink(event):
            fh.write(json.dumps(event, sort_keys=True) + "\n")
            fh.flush()

        record = train_run(config, sink=sink, trainer=trainer)
    (out / "record.json").write_text(record.to_json() + "\n")
    save_checkpoint(out / "train.ckpt", trainer.params(), seed=config.seed, step=trainer.step_count)
    for key, theta in trainer.bema.materialize(trainer.theta).items():
        save_checkpoint(out / _bema_filename(key), trainer.params(theta), seed=config.seed,
                        step=trainer.step_count, bema=key)
    last = record.history[-1]
    print(json.dumps({"steps": record.steps, "diverged": record.diverged, "final": last["train"],
                      "best": record.best["train"]}, sort_keys=True))
    if record.diverged and args.strict:
        return EXIT_FAIL
    return EXIT_OK


def cmd_search(args) -> int:
    from .search import SweepConfig, run_search

    try:
        cfg = SweepConfig.from_dict(_read_json(args.config))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad sweep config: {exc}") from exc
    if args.jobs is not None:
        cfg.jobs = args.jobs
    out = Path(args.out or _default_out("sweep"))
    try:
        records = run_search(cfg, out)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    write_manifest(out / "cli_manifest.json", args, seed=cfg.seed, config=cfg.__dict__)
    print(f"{len(records)} records in {out / 'records.jsonl'}")
    return EXIT_OK


def cmd_summarize(args) -> int:
    from .search import load_records, summarize, write_summary

    src = Path(args.input)
    records = load_records(src / "records.jsonl")
    if not records:
        raise UsageError(f"no records under {src}")
    rows, notes = summarize(records, tuple(args.group))
    out = Path(args.out) if args.out else src / "summary.csv"
    write_summary(out, rows)
    for note in notes:
        print(f"note: {note}", file=sys.stderr)
    write_manifest(_manifest_path(str(out), False), args)
    print(f"{len(rows)} groups -> {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .metrics import evaluate_logit_file

    try:
        result = evaluate_logit_file(args.logits, args.v)
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def _masks_for(out: str) -> str:
    return out + ".masks"


def cmd_othello_gen(args) -> int:
    from .othello import generate_corpus

    if args.count < 1:
        raise UsageError("--count must be >= 1")
    masks = args.masks
    if masks == "":
        masks = _masks_for(args.out)
    try:
        stats = generate_corpus(args.count, args.seed, args.out, masks, args.min_len, args.max_len,
                                args.no_pass_games)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    write_manifest(_manifest_path(args.out, False), args, seed=args.seed)
    print(json.dumps(stats, sort_keys=True))
    return EXIT_OK


def cmd_othello_eval(args) -> int:
    from .othello import evaluate_predictions

    corpus = args.corpus
    if corpus is None:
        if not args.masks.endswith(".masks"):
            raise UsageError("cannot infer the corpus path; pass --corpus")
        corpus = args.masks[: -len(".masks")]
    try:
        result = evaluate_predictions(args.logits, args.masks, corpus)
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def cmd_replay(args) -> int:
    manifest = _read_json(args.manifest)
    if manifest.get("command") in (None, "replay"):
        raise UsageError(f"{args.manifest} does not describe a replayable command")
    saved = dict(manifest["args"])
    if args.out is not None:
        saved["out"] = args.out
    if manifest["version"] != __version__:
        print(f"warning: manifest written by version {manifest['version']}, running {__version__}", file=sys.stderr)
    ns = argparse.Namespace(**saved)
    ns.func = COMMANDS[saved["command"]]
    return ns.func(ns)


COMMANDS = {
    "verify-theory": cmd_verify_theory,
    "train": cmd_train,
    "search": cmd_search,
    "summarize": cmd_summarize,
    "evaluate": cmd_evaluate,
    "othello-gen": cmd_othello_gen,
    "othello-eval": cmd_othello_eval,
    "replay": cmd_replay,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="setcomplement", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify-theory", help="certify the hardcoded constant-attention model")
    p.add_argument("--v", type=int, required=True, help="vocabulary size")
    p.add_argument("--C", type=float, default=10.0, help="target precision")
    p.add_argument("--norm", choices=["identity", "rmsnorm"], default="identity")
    p.add_argument("--out", help="JSON report path (stdout if omitted)")
    p.add_argument("--eq-tol", type=float, default=0.0, help="tolerance on legal-logit equality")
    p.add_argument("--tau", type=float, default=1e-8, help="relative singular-value threshold")
    p.add_argument("--max-v", type=int, default=MAX_EXHAUSTIVE_V, help="largest v enumerated exhaustively")

    p = sub.add_parser("train", help="single training run")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/run)")
    p.add_argument("--strict", action="store_true", help="exit 1 if the run diverges")

    p = sub.add_parser("search", help="random hyperparameter sweep (resumable)")
    p.add_argument("--config", required=True, help="sweep config JSON")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/sweep)")
    p.add_argument("--jobs", type=int, help="parallel ensembles (overrides config)")

    p = sub.add_parser("summarize", help="group sweep records into summary.csv")
    p.add_argument("--in", dest="input", required=True, help="sweep directory")
    p.add_argument("--group", nargs="+", default=["gap"],
                   choices=["gap", "embed_multiplier", "value_coefficient"])
    p.add_argument("--out", help="CSV path (default <in>/summary.csv)")

    p = sub.add_parser("evaluate", help="score external logits on the set complement task")
    p.add_argument("--logits", required=True, help='JSONL of {"tokens": [...], "logits": [...]}')
    p.add_argument("--v", type=int, required=True)

    p = sub.add_parser("othello-gen", help="random Othello corpus with legal-move masks")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-len", type=int, default=15)
    p.add_argument("--max-len", type=int, default=59)
    p.add_argument("--out", required=True, help="corpus path")
    p.add_argument("--masks", nargs="?", const="", default=None,
                   help="write the mask sidecar (default path <out>.masks)")
    p.add_argument("--no-pass-games", action="store_true", help="drop games containing a pass")

    p = sub.add_parser("othello-eval", help="score external Othello predictions")
    p.add_argument("--logits", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--corpus", help="corpus path (default: masks path without .masks)")

    p = sub.add_parser("replay", help="rerun a command from its manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="override the recorded output location")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
