"""``tdnnas`` command-line entry point.

Each subcommand reads a JSON config (see :mod:`tdnnas.config`) and writes
its artifacts under ``--out`` (default: the config's ``out``).  Exit status
is 0 on success, 1 on a validation or runtime error and 2 on bad usage.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from pathlib import Path

from .config import Config, ConfigError, load_config
from .formats import (
    FormatError,
    format_spec,
    load_checkpoint,
    load_run_record,
    load_spec_file,
    save_checkpoint,
    save_metrics,
    save_run_record,
    save_spec_file,
    save_trajectory,
)
from .search import (
    METHODS,
    DivergenceError,
    SearchConfig,
    derive_architecture,
    exhaustive_oracle,
    random_search,
    retrain,
    retrain_record,
    run_search,
)
from .supernet import ArchWeights, search_space_size
from .tasks import FormatError as DatasetFormatError
from .tasks import TrainedModel, evaluate, save_dataset

log = logging.getLogger("tdnnas")

SEARCH_METHODS = ("softmax-darts", "gumbel-darts", "pipe-softmax", "pipe-gumbel")
REPORT_COLUMNS = ("system_id", "method", "eta", "arch", "heldout_accuracy", "test_accuracy", "params", "wall_time")


class CliError(Exception):
    pass


# -- helpers ----------------------------------------------------------------


def _config(args) -> Config:
    cfg = load_config(args.config) if args.config else Config()
    overrides = {}
    for flag in ("method", "eta", "seed"):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[flag] = value
    if overrides:
        cfg.search = SearchConfig(**{**cfg.search.as_dict(), **overrides})
    if getattr(args, "out", None):
        cfg.out = args.out
    return cfg


def _out_dir(cfg: Config, *parts: str) -> Path:
    path = Path(cfg.out, *parts)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_record(path: Path, record, trajectory_name: str | None = None) -> None:
    d = record.as_dict()
    if trajectory_name:
        d["trajectory"] = trajectory_name
    save_run_record(path, d)


def _model_tensors(params: dict) -> dict:
    return {f"model.{k}": v for k, v in params.items()}


# -- subcommands ------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    for part, name in ((0, "train.ds"), (1, "test.ds")):
        ds = cfg.task.generate(part)
        save_dataset(ds, out / name)
        print(f"wrote {out / name}: {len(ds)} sequences, {ds.frame_count()} supervised frames")
    return 0


def cmd_search(args) -> int:
    cfg = _config(args)
    if cfg.search.method not in SEARCH_METHODS:
        raise CliError(f"search runs one of {', '.join(SEARCH_METHODS)}; use random-search or enumerate for {cfg.search.method!r}")
    space, data = cfg.build_space(), cfg.build_data()
    digest = cfg.digest()
    res = run_search(cfg.search, space, data)
    res.record.config_hash = digest
    out = _out_dir(cfg, res.record.system_id)
    save_checkpoint(out / "supernet.ck", {**_model_tensors(res.params), **res.arch.tensors()}, digest)
    if res.stage1_params is not None:
        save_checkpoint(out / "stage1.ck", _model_tensors(res.stage1_params), digest)
    save_spec_file(out / "derived.spec", res.spec, digest)
    save_trajectory(out / "trajectory.trj", res.trajectory, digest)
    _write_record(out / "run.json", res.record, "trajectory.trj")
    print(f"{res.record.system_id}: {res.record.arch}  heldout={res.record.heldout['accuracy']:.4f}  -> {out}")
    return 0


def cmd_derive(args) -> int:
    cfg = _config(args)
    space = cfg.build_space()
    tensors, _ = load_checkpoint(args.checkpoint)
    arch = ArchWeights.from_tensors(space, tensors)
    spec = derive_architecture(arch, space)
    out = Path(args.spec_out) if args.spec_out else Path(args.checkpoint).with_name("derived.spec")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_spec_file(out, spec, cfg.digest())
    print(f"{format_spec(spec)}  -> {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    spec = load_spec_file(args.spec)
    space, data = cfg.build_space(), cfg.build_data()
    index = space.index_of(spec) if space.contains(spec) else 0
    t0 = time.perf_counter()
    res = retrain(spec, data, cfg.search, index=index)
    system_id = args.system_id or f"train-{cfg.search.method}-eta{cfg.search.eta:g}-seed{cfg.search.seed}"
    record = retrain_record(res, cfg.search, cfg.search.method, system_id, time.perf_counter() - t0)
    record.config_hash = cfg.digest()
    out = _out_dir(cfg, system_id)
    save_checkpoint(out / "model.ck", _model_tensors(res.params), record.config_hash)
    save_spec_file(out / "model.spec", spec, record.config_hash)
    _write_record(out / "run.json", record)
    save_metrics(out / "metrics.json", {"heldout": res.heldout.as_dict(), "test": res.test.as_dict(),
                                        "config_hash": record.config_hash})
    print(f"{system_id}: {record.arch}  test={res.test.accuracy:.4f}  -> {out}")
    return 0


def cmd_random_search(args) -> int:
    cfg = _config(args)
    space, data = cfg.build_space(), cfg.build_data()
    t0 = time.perf_counter()
    best, _ = random_search(cfg.search, space, data, args.samples)
    system_id = f"random-seed{cfg.search.seed}"
    record = retrain_record(best, cfg.search, "random", system_id, time.perf_counter() - t0)
    record.config_hash = cfg.digest()
    out = _out_dir(cfg, system_id)
    save_checkpoint(out / "model.ck", _model_tensors(best.params), record.config_hash)
    save_spec_file(out / "model.spec", best.spec, record.config_hash)
    _write_record(out / "run.json", record)
    print(f"{system_id}: {record.arch}  test={best.test.accuracy:.4f}  -> {out}")
    return 0


def cmd_enumerate(args) -> int:
    cfg = _config(args)
    space = cfg.build_space()
    size = search_space_size(space)
    cap = cfg.search.enum_cap if args.cap is None else args.cap
    if size > cap:
        raise CliError(f"search space has {size} candidates, exceeds enumeration cap {cap}")
    data = cfg.build_data()
    ranking = exhaustive_oracle(cfg.search, space, data, cap=cap)
    out = _out_dir(cfg, f"oracle-seed{cfg.search.seed}")
    rows = [{"rank": r + 1, "index": res.index, "arch": format_spec(res.spec), "params": res.param_count,
             "heldout_accuracy": res.heldout.accuracy, "test_accuracy": res.test.accuracy}
            for r, res in enumerate(ranking)]
    with open(out / "oracle.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    best = ranking[0]
    record = retrain_record(best, cfg.search, "exhaustive", f"oracle-seed{cfg.search.seed}", 0.0)
    record.config_hash = cfg.digest()
    _write_record(out / "run.json", record)
    print(f"ranked {len(rows)} candidates; best {rows[0]['arch']} heldout={rows[0]['heldout_accuracy']:.4f}  -> {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    spec = load_spec_file(args.spec)
    tensors, _ = load_checkpoint(args.checkpoint)
    params = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    data = cfg.build_data()
    model = TrainedModel(spec, params)
    try:
        metrics = {"heldout": evaluate(model, data.heldout).as_dict(), "test": evaluate(model, data.test).as_dict()}
    except KeyError as e:
        raise CliError(f"checkpoint does not match spec: missing tensor {e}") from None
    metrics["config_hash"] = cfg.digest()
    if args.metrics_out:
        save_metrics(args.metrics_out, metrics)
    sys.stdout.write(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return 0


def _collect_records(paths) -> list[dict]:
    records = []
    for p in map(Path, paths):
        files = sorted(p.rglob("run.json")) if p.is_dir() else [p]
        records.extend(load_run_record(f) for f in files)
    if not records:
        raise CliError("no run records found")
    return records


def report_rows(records: list[dict]) -> list[dict]:
    rows = [{
        "system_id": r["system_id"],
        "method": r["method"],
        "eta": r["eta"],
        "arch": r["arch"],
        "heldout_accuracy": r["heldout"]["accuracy"],
        "test_accuracy": r["test"]["accuracy"],
        "params": r["param_count"],
        "wall_time": r["wall_time"],
    } for r in records]
    rows.sort(key=lambda row: row["system_id"])
    rows.sort(key=lambda row: -row["test_accuracy"])
    return rows


def report_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def report_markdown(rows: list[dict]) -> str:
    head = ["System", "Method", "η", "Architecture", "Held-out acc", "Test acc", "#Params", "Time (s)"]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for r in rows:
        cells = [r["system_id"], r["method"], f"{r['eta']:g}", f"`{r['arch']}`", f"{r['heldout_accuracy']:.4f}",
                 f"{r['test_accuracy']:.4f}", str(r["params"]), f"{r['wall_time']:.1f}"]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    rows = report_rows(_collect_records(args.runs))
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report_csv(rows))
    (out / "report.md").write_text(report_markdown(rows))
    sys.stdout.write(report_markdown(rows))
    return 0


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tdnnas", description="Differentiable architecture search for TDNN-F models.")
    parser.add_argument("--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def command(name, fn, help_text, *, method=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="override search.seed")
        p.add_argument("--out", help="output directory (overrides the config's out)")
        if method:
            p.add_argument("--method", choices=METHODS, help="override search.method")
            p.add_argument("--eta", type=float, help="override search.eta (parameter-count penalty)")
        p.set_defaults(fn=fn)
        return p

    command("gen-data", cmd_gen_data, "write train.ds and test.ds for the configured task")
    command("search", cmd_search, "run DARTS search and write checkpoint, spec, trajectory and run record", method=True)
    p = command("derive", cmd_derive, "derive an architecture from a search checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--spec-out", help="where to write the spec (default: next to the checkpoint)")
    p = command("train", cmd_train, "retrain a spec from scratch", method=True)
    p.add_argument("--spec", required=True)
    p.add_argument("--system-id", help="name for the run (default derives from method, eta and seed)")
    p = command("random-search", cmd_random_search, "retrain random candidates and keep the best on held-out data")
    p.add_argument("--samples", type=int, help="number of candidates (default search.random_samples)")
    p = command("enumerate", cmd_enumerate, "exhaustively retrain every candidate of a small space")
    p.add_argument("--cap", type=int, help="maximum space size (default search.enum_cap)")
    p = command("eval", cmd_eval, "evaluate a trained checkpoint on held-out and test data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--spec", required=True)
    p.add_argument("--metrics-out", help="also write the metrics JSON here")
    p = sub.add_parser("report", help="tabulate run records as CSV and markdown")
    p.add_argument("runs", nargs="+", help="run.json files or directories searched recursively")
    p.add_argument("--out", help="directory for report.csv and report.md (default: current directory)")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (CliError, ConfigError, FormatError, DatasetFormatError, DivergenceError, ValueError, OSError) as e:
        print(f"tdnnas {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
