"""Command-line entry point: ``fedod <command> [options]``.

Every command writes into a fresh temporary directory next to its output
directory and renames it into place only on success. The resolved options are
saved as ``config.json`` in the output; passing that file back through
``--config`` reproduces the run.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

from . import boxkit, datagen, detector, experiment, federation, metrics, report, tensornn as tnn
from .detector import DetectorModel, TrainConfig
from .distill import DistillConfig
from .federation import FederationConfig, RoundRecord

log = logging.getLogger("fedod")

OUTPUT_ROOT_ENV = "FEDOD_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "fedod-out"
# default sub-directories under the output root, so the commands chain without flags
DEFAULT_DIRS = {
    "gen-data": "data",
    "train-base": "base",
    "fed-run": "fed",
    "evaluate": "eval",
    "fuse-compare": "fusion",
}


class CliError(Exception):
    pass


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT))


def _default_dir(command: str) -> str:
    return str(output_root() / DEFAULT_DIRS[command])


# ---------------------------------------------------------------------------
# output handling
# ---------------------------------------------------------------------------


@contextlib.contextmanager
def locked_output(out: Path, seed_from_existing: bool = False):
    """Yield a temp dir; promote it to ``out`` on success, discard it on error.

    A ``<out>.lock`` file guards against concurrent runs on the same output.
    """
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    lock = out.with_name(out.name + ".lock")
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(f"output {out} is locked by another run ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
        try:
            if seed_from_existing and out.is_dir():
                shutil.copytree(out, tmp, dirs_exist_ok=True)
            yield tmp
        except BaseException:
            shutil.rmtree(tmp, ignore_errors=True)
            raise
        old = None
        if out.exists():
            old = out.with_name(f".{out.name}.old-{os.getpid()}")
            out.rename(old)
        tmp.rename(out)
        if old is not None:
            shutil.rmtree(old, ignore_errors=True)
    finally:
        lock.unlink(missing_ok=True)


def _echo_config(directory: Path, args: argparse.Namespace) -> None:
    (directory / "config.json").write_text(json.dumps(resolved_config(args), indent=2, sort_keys=True) + "\n")


def resolved_config(args: argparse.Namespace) -> dict:
    out = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config", "verbose")}
    if "resume" in out:
        # a resumed run ends where a straight run would, so the echo replays from scratch
        out["resume"] = False
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# shared loaders
# ---------------------------------------------------------------------------


def _load_data(path) -> datagen.Benchmark:
    try:
        return datagen.load_benchmark(path)
    except FileNotFoundError as exc:
        raise CliError(f"dataset not found: {exc}") from exc


def _load_model(path) -> DetectorModel:
    p = Path(path)
    if not p.exists():
        raise CliError(f"missing checkpoint {p}")
    return DetectorModel.load(p)


def _run_config(run_dir: Path) -> dict:
    p = run_dir / "config.json"
    if not p.exists():
        raise CliError(f"{run_dir} is not a fed-run output (config.json missing)")
    return json.loads(p.read_text())


def _load_run(run_dir: Path):
    """Rebuild base, per-round records and the ensemble personal models of a fed-run output."""
    state = federation.load_checkpoint(run_dir)
    if state.round < 1:
        raise CliError(f"{run_dir} holds no completed rounds")
    records = []
    for t in range(1, state.round + 1):
        st = federation.load_checkpoint(run_dir, t)
        records.append(RoundRecord(t, st.client_models, st.global_model, []))
    ens_dir = run_dir / "ensemble"
    personal = {}
    for c in sorted(state.client_models):
        personal[c] = _load_model(ens_dir / f"personal_{c}.ckpt")
    return state, records, personal


def _thresholds(args) -> federation.Thresholds:
    return federation.Thresholds(args.score_threshold, args.nms_threshold)


def _exp_config(args) -> experiment.ExperimentConfig:
    return experiment.ExperimentConfig(
        alphas=tuple(args.alphas),
        score_threshold=args.score_threshold,
        nms_threshold=args.nms_threshold,
        wbf_threshold=args.wbf_threshold,
    )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    bench = datagen.build_benchmark(
        args.seed, args.server_train, args.server_test, args.client_train, args.client_test
    )
    with locked_output(Path(args.out)) as tmp:
        manifest = datagen.save_benchmark(bench, tmp)
        _echo_config(tmp, args)
    counts = {k: v["count"] for k, v in manifest["splits"].items()}
    print(f"wrote {args.out}: {counts}")
    return 0


def cmd_train_base(args) -> int:
    bench = _load_data(args.data)
    out = Path(args.out)
    with locked_output(out) as tmp:
        start, init, losses = 0, DetectorModel.init(args.seed), []
        if args.resume:
            prev = out / "train_state.json"
            if not prev.exists():
                raise CliError(f"nothing to resume in {out}")
            st = json.loads(prev.read_text())
            if (st["seed"], st["lr"], st["batch_size"]) != (args.seed, args.lr, args.batch_size):
                raise CliError("resume needs the same seed, lr and batch size as the interrupted run")
            start, losses = st["epochs_done"], list(st["losses"])
            if start > args.epochs:
                raise CliError(f"checkpoint already has {start} epochs, more than --epochs {args.epochs}")
            init = _load_model(out / "base.ckpt")
        model = detector.train_local(
            init, bench.server_train, args.epochs, args.lr, args.seed, args.batch_size, log=losses, start_epoch=start
        )
        model.save(tmp / "base.ckpt")
        with (tmp / "loss.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss"])
            w.writerows([i + 1, f"{v:.8f}"] for i, v in enumerate(losses))
        state = {"epochs_done": args.epochs, "losses": losses, "seed": args.seed, "lr": args.lr}
        state["batch_size"] = args.batch_size
        _write_json(tmp / "train_state.json", state)
        _echo_config(tmp, args)
    print(f"wrote {out / 'base.ckpt'} after {args.epochs} epochs")
    return 0


def _fed_configs(args):
    train = TrainConfig(args.epochs, args.lr, args.batch_size)
    dist = DistillConfig(
        args.lambdas[0], args.lambdas[1], args.lambdas[2], args.temperature, args.distill_epochs, args.distill_lr,
        args.batch_size,
    )
    return train, dist


def cmd_fed_run(args) -> int:
    bench = _load_data(args.data)
    base = _load_model(args.base)
    train, dist = _fed_configs(args)
    out = Path(args.out)
    with locked_output(out, seed_from_existing=args.resume) as tmp:
        resume = None
        if args.resume:
            if _run_config(out).get("aggregator") != args.aggregator:
                raise CliError("cannot resume a run with a different aggregator")
            resume = federation.load_checkpoint(out)
        cfg = FederationConfig(args.rounds, args.seed, train, dist, args.aggregator, args.workers, str(tmp))
        state, _ = federation.run_federation(base, experiment.federation_data(bench), cfg, resume_from=resume)
        rows = []
        if state.round >= 1:
            ens_dir = tmp / "ensemble"
            ens_dir.mkdir(exist_ok=True)
            for c in bench.client_ids:
                e = federation.ensemble_step(state, c, bench.client_train[c], train, args.wbf_threshold)
                e.personal.save(ens_dir / f"personal_{c}.ckpt")
        th = _thresholds(args)
        rows.append((0, "w_b", _shared_indicators(bench, base, th, args.alphas)))
        for t in range(1, state.round + 1):
            g = federation.load_checkpoint(tmp, t).global_model
            rows.append((t, f"w^{t}_g", _shared_indicators(bench, g, th, args.alphas)))
        (tmp / "rounds.csv").write_text(report.round_log_csv(rows))
        _echo_config(tmp, args)
    print(f"wrote {out}: {state.round} rounds ({args.aggregator})")
    return 0


def _shared_indicators(bench, model, th, alphas) -> metrics.FedIndicators:
    p = experiment.ModelPredictor(model, th)
    return metrics.compute_indicators({c: p for c in bench.client_ids}, bench.server_test, bench.client_test, alphas)


def cmd_evaluate(args) -> int:
    bench = _load_data(args.data)
    th = _thresholds(args)
    with locked_output(Path(args.out)) as tmp:
        if args.models == "base":
            base = _load_model(args.base)
            columns = {"w_b": _shared_indicators(bench, base, th, args.alphas)}
        else:
            state, records, personal = _load_run(Path(args.run))
            ensembles = {
                c: federation.EnsembleModel(state.global_model, p, args.wbf_threshold) for c, p in personal.items()
            }
            columns = experiment.evaluate_columns(bench, state.base_model, records, ensembles, _exp_config(args))
        report.write_report(tmp, "report", columns, "federated indicators", meta={"models": args.models})
        _echo_config(tmp, args)
    print(report.table_csv(columns), end="")
    return 0


def cmd_fuse_compare(args) -> int:
    bench = _load_data(args.data)
    with locked_output(Path(args.out)) as tmp:
        state, _, personal = _load_run(Path(args.run))
        ensembles = {c: federation.EnsembleModel(state.global_model, p, args.wbf_threshold) for c, p in personal.items()}
        fusion = experiment.fusion_comparison(bench, ensembles, _exp_config(args))
        report.write_report(tmp, "fusion", fusion, "fusion methods", indicators=["A_s", "A_p"])
        _echo_config(tmp, args)
    print(report.table_csv(fusion, ["A_s", "A_p"]), end="")
    return 0


def cmd_fuse(args) -> int:
    src = Path(args.input)
    if not src.exists():
        raise CliError(f"missing box file {src}")
    with src.open() as fh:
        per_image = boxkit.load_records(fh)
    fused = {i: boxkit.fuse(d, args.method, args.iou, args.num_models) for i, d in sorted(per_image.items())}
    text = boxkit.records_to_text(fused)
    if args.output in (None, "-"):
        sys.stdout.write(text)
    else:
        out = Path(args.output)
        out.parent.mkdir(parents=True, exist_ok=True)
        tmp = out.with_name(f".{out.name}.tmp")
        tmp.write_text(text)
        tmp.replace(out)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_eval_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--score-threshold", type=float, default=detector.DEFAULT_SCORE_THRESHOLD,
                   help="per-model score cut before NMS (default %(default)s)")
    p.add_argument("--nms-threshold", type=float, default=detector.DEFAULT_PREDICT_NMS,
                   help="per-model NMS IoU (default %(default)s)")
    p.add_argument("--wbf-threshold", type=float, default=federation.ENSEMBLE_WBF_IOU,
                   help="WBF cluster IoU for the ensemble (default %(default)s)")
    p.add_argument("--alphas", type=float, nargs="+", default=list(metrics.DEFAULT_ALPHAS),
                   help="A_com blend weights (default %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedod", description="Cross-domain federated object detection simulator.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(func=func)
        p.add_argument("--config", help="JSON file whose keys override the command-line options")
        return p

    p = command("gen-data", cmd_gen_data, "Render the synthetic multi-domain benchmark.")
    p.add_argument("--out", default=None, help=f"output directory (default ${OUTPUT_ROOT_ENV}/data)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--server-train", type=int, default=2000)
    p.add_argument("--server-test", type=int, default=400)
    p.add_argument("--client-train", type=int, default=150)
    p.add_argument("--client-test", type=int, default=100)

    p = command("train-base", cmd_train_base, "Train the base model w_b on the server training split.")
    p.add_argument("--data", default=None, help="dataset directory (default: the gen-data output)")
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--resume", action="store_true", help="continue the checkpoint already in --out")

    p = command("fed-run", cmd_fed_run, "Run federated rounds from the base model.")
    p.add_argument("--data", default=None)
    p.add_argument("--base", default=None, help="base checkpoint (default: the train-base output)")
    p.add_argument("--out", default=None)
    p.add_argument("--aggregator", choices=("distill", "fedavg"), default="distill")
    p.add_argument("--rounds", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=12, help="local fine-tuning epochs per round")
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--distill-epochs", type=int, default=DistillConfig.epochs)
    p.add_argument("--distill-lr", type=float, default=DistillConfig.lr)
    p.add_argument("--lambdas", type=float, nargs=3, default=[1.0, 1.0, 1.0], metavar=("FEA", "CLS", "REG"))
    p.add_argument("--temperature", type=float, default=DistillConfig.temperature)
    p.add_argument("--workers", type=int, default=1, help="threads for client training")
    p.add_argument("--resume", action="store_true", help="continue the run already in --out")
    _add_eval_options(p)

    p = command("evaluate", cmd_evaluate, "Indicator report over the base, personal, global and ensemble models.")
    p.add_argument("--data", default=None)
    p.add_argument("--run", default=None, help="fed-run output directory")
    p.add_argument("--base", default=None, help="base checkpoint, used with --models base")
    p.add_argument("--models", choices=("all", "base"), default="all")
    p.add_argument("--out", default=None)
    _add_eval_options(p)

    p = command("fuse-compare", cmd_fuse_compare, "Compare NMS, Soft-NMS, NWM and WBF on the final ensembles.")
    p.add_argument("--data", default=None)
    p.add_argument("--run", default=None)
    p.add_argument("--out", default=None)
    _add_eval_options(p)

    p = command("fuse", cmd_fuse, "Fuse a box-record file (image_id,class_id,x1,y1,x2,y2,confidence,model_id).")
    p.add_argument("input")
    p.add_argument("--output", default=None, help="output file (default stdout)")
    p.add_argument("--method", choices=boxkit.FUSION_METHODS, default="wbf")
    p.add_argument("--iou", type=float, default=None, help="IoU threshold (method default if omitted)")
    p.add_argument("--num-models", type=int, default=2)
    return parser


def _apply_config_file(args: argparse.Namespace, parser: argparse.ArgumentParser) -> None:
    if not getattr(args, "config", None):
        return
    path = Path(args.config)
    if not path.exists():
        raise CliError(f"config file {path} not found")
    try:
        overrides = json.loads(path.read_text())
    except ValueError as exc:
        raise CliError(f"config file {path} is not valid JSON: {exc}") from exc
    if overrides.get("command", args.command) != args.command:
        raise CliError(f"config file is for '{overrides['command']}', not '{args.command}'")
    for key, value in overrides.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise CliError(f"unknown option {key!r} in {path}")
        setattr(args, attr, value)


def _fill_defaults(args: argparse.Namespace) -> None:
    chain = {"data": "gen-data", "base": "train-base", "run": "fed-run"}
    for attr, producer in chain.items():
        if hasattr(args, attr) and getattr(args, attr) is None:
            setattr(args, attr, _default_dir(producer))
    if getattr(args, "base", None) and Path(args.base).is_dir():
        args.base = str(Path(args.base) / "base.ckpt")
    if hasattr(args, "out") and args.out is None:
        args.out = _default_dir(args.command)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        _apply_config_file(args, parser)
        _fill_defaults(args)
        return args.func(args)
    except (CliError, tnn.CheckpointError, detector.ArchitectureMismatch, FileNotFoundError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"fedod {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
