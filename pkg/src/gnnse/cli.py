"""Command-line pipelines: data generation, PMU placement, training, evaluation and reports.

Every command writes fixed file names under ``--out``; randomness comes only
from ``--seed``. ``--config FILE`` supplies defaults as JSON, either flat
(``{"epochs": 50}``) or per command (``{"train": {"epochs": 50}}``); explicit
flags win.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .experiments import (METRIC_FIELDS, STUDY_LIT_LINES, STUDY_MIT_LINES, TABLE1_FIELDS, TABLE2_FIELDS,
                          TABLE3_FIELDS, StudyConfig, compute_metrics, default_placement, density_name,
                          error_density, label_stats, labels_in_degrees, lse_estimate, model_estimate,
                          rank_outages, read_csv, record_training_data, run_topology_study, sample_errors,
                          select_outages, stats_in_degrees, table_rows, write_csv, write_density,
                          write_metrics, write_ranking, write_sidecar)
from .grid_model import (CaseError, NetworkCase, build_adjacency, bundled_case, line_label, load_case,
                         parse_line_list, parse_line_spec)
from .measurement import PmuPlacement, auto_placement, parse_noise
from .nn import TrainConfig, load_model, new_model, save_model, train
from .powerflow import Dataset, ScenarioConfig, config_hash, generate_dataset

log = logging.getLogger("gnnse")

DATASET_DIR = "dataset"
MODEL_FILE = "model.bin"
METRICS_FILE = "metrics.csv"
RANK_FILE = "topo_rank.csv"
PLACEMENT_FILE = "placement.json"
TOPOLOGIES_FILE = "topologies.json"


class CliError(Exception):
    pass


# ------------------------------------------------------------------- helpers

def _case(spec: str) -> NetworkCase:
    path = Path(spec)
    if path.exists():
        return load_case(path)
    if spec.startswith("case") and "/" not in spec:
        try:
            return bundled_case(spec)
        except FileNotFoundError:
            pass
    raise CliError(f"case {spec!r} is neither a file nor a bundled case")


def _placement(spec: str, case: NetworkCase) -> PmuPlacement:
    if spec == "auto":
        return default_placement(case)
    path = Path(spec)
    if not path.exists():
        raise CliError(f"placement file {spec} not found")
    placement = PmuPlacement.from_json(path.read_text())
    placement.indices(case)  # raises on unknown bus ids
    return placement


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} {path} not found")
    return p


def _dataset_dir(path: str) -> Path:
    p = _existing(path, "dataset")
    if (p / DATASET_DIR / "manifest.json").exists():
        p = p / DATASET_DIR
    if not (p / "manifest.json").exists():
        raise CliError(f"{path} holds no dataset manifest")
    return p


def load_checked_dataset(path: str, case: Optional[NetworkCase] = None) -> Dataset:
    """Load a dataset and reject stale manifests or a mismatched case."""
    d = _dataset_dir(path)
    stored = json.loads((d / "manifest.json").read_text())
    data = Dataset.load(d)
    if data.manifest()["config_hash"] != stored.get("config_hash"):
        raise CliError(f"{d}: manifest config hash does not match its contents")
    if case is not None and data.case_hash != case.content_hash():
        raise CliError(f"{d}: dataset was generated from a different case")
    return data


def _check_model_data(model, data: Dataset) -> None:
    meta = model.meta
    if meta.get("case_hash") not in (None, data.case_hash):
        raise CliError("model and dataset come from different cases")
    if meta.get("placement") is not None and list(meta["placement"]) != list(data.placement):
        raise CliError("model was trained with a different PMU placement than the dataset uses")


def _noise_label(doc: dict) -> str:
    return {"gmm2": "gmm"}.get(doc.get("type", ""), doc.get("type", ""))


def _out(path: str) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _metrics_with_sidecar(path: Path, reports, seeds: dict, extra: dict) -> None:
    write_metrics(path, reports)
    write_sidecar(path, seeds, config_hash(extra), extra)


def _write_densities(out: Path, estimates: dict, truth, cfg: StudyConfig, topology: str, seeds, extra):
    for name, est in estimates.items():
        e_mag, e_ang = sample_errors(est, truth)
        for qty, errs, rng in (("magnitude", e_mag, cfg.mag_range), ("angle", e_ang, cfg.ang_range)):
            d = error_density(errs, -rng, rng, cfg.bins, quantity=qty, estimator=name, topology=topology)
            path = write_density(out / density_name(d), d)
            write_sidecar(path, seeds, config_hash(extra), extra)


# ------------------------------------------------------------------ commands

def cmd_gen_data(args) -> int:
    case = _case(args.case)
    placement = _placement(args.placement, case)
    outage = parse_line_spec(case, args.outage) if args.outage else None
    noise = parse_noise(args.noise)
    current = parse_noise(args.current_noise) if args.current_noise else None
    scen = ScenarioConfig(args.load_min, args.load_max, args.bus_min, args.bus_max)
    data = generate_dataset(case, args.samples, noise, placement, args.seed, outage=outage,
                            scenario_cfg=scen, current_noise=current)
    d = data.save(_out(args.out) / DATASET_DIR)
    load_checked_dataset(str(d), case)
    print(f"wrote {len(data)} samples ({data.topology}, {len(placement)} PMUs) to {d}")
    return 0


def cmd_place_pmus(args) -> int:
    case = _case(args.case)
    outages = parse_line_list(case, args.outages or [])
    if args.study_lines:
        outages += parse_line_list(case, STUDY_MIT_LINES + STUDY_LIT_LINES)
    placement = auto_placement(case, sorted(set(outages)))
    path = _out(args.out) / PLACEMENT_FILE
    path.write_text(placement.to_json() + "\n")
    print(f"{len(placement)} PMUs at buses {list(placement.buses)}; wrote {path}")
    return 0


def cmd_train(args) -> int:
    case = _case(args.case)
    data = load_checked_dataset(args.data, case)
    if data.outage is not None:
        log.warning("training on an outaged topology (%s)", data.topology)
    arch = "mlp" if args.model in ("dnn", "mlp") else "gnn"
    model = new_model(arch, case.n_bus, args.seed, hidden=args.hidden)
    adj = build_adjacency(case, data.outage) if arch == "gnn" else None
    cfg = TrainConfig(epochs=args.epochs, lr=args.lr, batch_size=args.batch_size, seed=args.seed,
                      full_batch=args.full_batch)

    def progress(epoch, loss, _val):
        if args.verbose and (epoch % 10 == 0 or epoch == cfg.epochs - 1):
            print(f"epoch {epoch:4d}  loss {loss:.6f}", file=sys.stderr)

    result = train(model, data.features, data.labels, adj, cfg, progress=progress)
    record_training_data(model, data)
    out = _out(args.out)
    path = out / MODEL_FILE
    save_model(model, path)
    load_model(path)
    extra = {"model": arch, "epochs": args.epochs, "lr": args.lr, "hidden": args.hidden,
             "batch_size": args.batch_size, "dataset": model.meta["dataset"], "loss": result.loss}
    write_sidecar(path, {"model": args.seed, "data": data.seed}, config_hash(extra), extra)
    print(f"trained {arch} for {args.epochs} epochs, final loss {result.loss[-1]:.6f}; wrote {path}")
    return 0


def cmd_eval(args) -> int:
    case = _case(args.case)
    data = load_checked_dataset(args.data, case)
    model = load_model(_existing(args.model, "model"))
    _check_model_data(model, data)
    truth = labels_in_degrees(data.labels)
    est = model_estimate(model, case, data)
    name = "gnn" if model.arch == "gnn" else "mlp"
    stats = stats_in_degrees(model.out_norm)
    report = compute_metrics(est, truth, stats, name, _noise_label(data.noise), data.topology.replace("outage:", ""))
    out = _out(args.out)
    cfg = StudyConfig(bins=args.bins, mag_range=args.mag_range, ang_range=args.ang_range)
    extra = {"model": model.meta.get("dataset"), "dataset": data.manifest()["config_hash"],
             "bins": args.bins, "mag_range": args.mag_range, "ang_range": args.ang_range}
    seeds = {"data": data.seed, "model": model.meta.get("seed")}
    _metrics_with_sidecar(out / METRICS_FILE, [report], seeds, extra)
    _write_densities(out, {name: est}, truth, cfg, report.topology, seeds, extra)
    print(_summary(report))
    return 0


def cmd_lse(args) -> int:
    case = _case(args.case)
    data = load_checked_dataset(args.data, case)
    placement = PmuPlacement(data.placement)
    truth = labels_in_degrees(data.labels)
    est = lse_estimate(case, placement, data)
    stats = None
    if args.stats_from:
        train_data = load_checked_dataset(args.stats_from, case)
        stats = label_stats(train_data.labels)
    report = compute_metrics(est, truth, stats, "lse", _noise_label(data.noise), data.topology.replace("outage:", ""))
    extra = {"dataset": data.manifest()["config_hash"],
             "stats_from": train_data.manifest()["config_hash"] if args.stats_from else None}
    _metrics_with_sidecar(_out(args.out) / METRICS_FILE, [report], {"data": data.seed}, extra)
    print(_summary(report))
    return 0


def cmd_topo_scan(args) -> int:
    case = _case(args.case)
    out = _out(args.out)
    impacts = rank_outages(case)
    rank_path = write_ranking(out / RANK_FILE, impacts)
    noise = parse_noise(args.noise).to_dict()
    cfg = StudyConfig(n_test=args.samples, test_seed=args.seed, top_k=args.top_k,
                      pin_paper_lines=args.pin_paper_lines, topology_noise=_noise_label(noise),
                      noises={_noise_label(noise): noise},
                      bins=args.bins, mag_range=args.mag_range, ang_range=args.ang_range)
    if args.pin_paper_lines:
        mit, lit = parse_line_list(case, STUDY_MIT_LINES), parse_line_list(case, STUDY_LIT_LINES)
    else:
        mit, lit = select_outages(impacts, args.top_k)
    selection = {"mit": [line_label(case, k) for k in mit], "lit": [line_label(case, k) for k in lit],
                 "pinned": bool(args.pin_paper_lines)}
    extra = {"case_hash": case.content_hash(), "top_k": args.top_k, "selection": selection}
    write_sidecar(rank_path, {}, config_hash(extra), extra)
    (out / TOPOLOGIES_FILE).write_text(json.dumps(selection, indent=2) + "\n")
    print(f"ranked {sum(o.ranked for o in impacts)} outages; MIT {selection['mit']}; LIT {selection['lit']}")
    if not (args.gnn or args.dnn):
        return 0

    models = {}
    for arch, path in (("gnn", args.gnn), ("mlp", args.dnn)):
        if path:
            models[arch] = load_model(_existing(path, "model"))
    if not args.train_data:
        raise CliError("--train-data is needed to fix the Total MAE statistics")
    train_data = load_checked_dataset(args.train_data, case)
    placement = PmuPlacement(train_data.placement)
    for m in models.values():
        _check_model_data(m, train_data)
    cfg.scenario = train_data.scenario or cfg.scenario
    result = run_topology_study(case, placement, models, train_data.labels, cfg, lines=(mit, lit))
    extra_m = {**extra, "train_data": train_data.manifest()["config_hash"], "study": cfg.hash(),
               "models": {a: m.meta.get("dataset") for a, m in models.items()}, "skipped": result.skipped}
    seeds = {"test": args.seed, "data": train_data.seed}
    _metrics_with_sidecar(out / METRICS_FILE, result.reports, seeds, extra_m)
    for d in result.densities:
        path = write_density(out / density_name(d), d)
        write_sidecar(path, seeds, config_hash(extra_m), extra_m)
    for topo, est, why in result.skipped:
        print(f"skipped {est} on {topo}: {why}", file=sys.stderr)
    for r in result.reports:
        print(_summary(r))
    return 0


def cmd_report(args) -> int:
    rows = []
    sources = []
    for spec in args.inputs:
        p = _existing(spec, "input")
        path = p / METRICS_FILE if p.is_dir() else p
        if not path.exists():
            raise CliError(f"{spec} holds no {METRICS_FILE}")
        got = read_csv(path)
        if got and set(METRIC_FIELDS) - set(got[0]):
            raise CliError(f"{path} is not a metrics table")
        rows.extend(got)
        sources.append(str(path))
    groups = {}
    if args.topologies:
        sel = json.loads(_existing(args.topologies, "topology selection").read_text())
        for group in ("mit", "lit"):
            for j, line in enumerate(sel.get(group, []), start=1):
                groups[line] = (group.upper(), j)
    tables = table_rows(rows, groups)
    out = _out(args.out)
    extra = {"inputs": sources}
    for name, fields in (("table1", TABLE1_FIELDS), ("table2", TABLE2_FIELDS), ("table3", TABLE3_FIELDS)):
        path = write_csv(out / f"{name}.csv", tables[name], fields)
        write_sidecar(path, {}, config_hash(extra), extra)
        print(f"{name}: {len(tables[name])} rows -> {path}")
    return 0


def _summary(r) -> str:
    return (f"{r.estimator:4s} {r.noise:8s} {r.topology:10s} MAE angle {r.mae_angle:.4f} deg  "
            f"MAPE {r.mape_magnitude:.4f} %  R2 {r.r2_angle:.4f}/{r.r2_magnitude:.4f}  "
            f"Total MAE {r.total_mae_normalized:.5f}")


# -------------------------------------------------------------------- parser

def _positive_int(text: str) -> int:
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gnnse", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def command(name, func, help_text, case=True):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(func=func)
        p.add_argument("--config", help="JSON file with default flag values")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if case:
            p.add_argument("--case", required=True, help="case file (JSON or MATPOWER) or bundled name, e.g. case118")
        return p

    def density_flags(p):
        p.add_argument("--bins", type=_positive_int, default=50)
        p.add_argument("--mag-range", type=_positive_float, default=0.005, help="density half-width, pu")
        p.add_argument("--ang-range", type=_positive_float, default=0.5, help="density half-width, degrees")

    p = command("gen-data", cmd_gen_data, "synthesize a noisy measurement dataset")
    p.add_argument("--samples", type=_positive_int, default=2000)
    p.add_argument("--noise", default="gmm", help="gaussian, gmm, none, or a JSON noise model")
    p.add_argument("--current-noise", help="separate noise model for current phasors")
    p.add_argument("--seed", type=_nonneg_int, default=0)
    p.add_argument("--outage", help="branch to remove, FROM-TO or #INDEX")
    p.add_argument("--placement", default="auto", help="placement JSON or 'auto'")
    p.add_argument("--load-min", type=_positive_float, default=0.8)
    p.add_argument("--load-max", type=_positive_float, default=1.2)
    p.add_argument("--bus-min", type=_positive_float, default=0.95)
    p.add_argument("--bus-max", type=_positive_float, default=1.05)

    p = command("place-pmus", cmd_place_pmus, "greedy PMU placement covering every bus")
    p.add_argument("--outages", nargs="*", help="outages the placement must also cover")
    p.add_argument("--study-lines", action="store_true", help="also cover the pinned MIT/LIT study lines")

    p = command("train", cmd_train, "train a GNN or DNN state estimator")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--model", choices=["gnn", "dnn", "mlp"], default="gnn")
    p.add_argument("--epochs", type=_positive_int, default=200)
    p.add_argument("--lr", type=_positive_float, default=1e-3)
    p.add_argument("--hidden", type=_positive_int, help="hidden width (default 64 for gnn, 200 for dnn)")
    p.add_argument("--batch-size", type=_positive_int, default=32)
    p.add_argument("--full-batch", action="store_true")
    p.add_argument("--seed", type=_nonneg_int, default=0)

    p = command("eval", cmd_eval, "score a trained model on a dataset")
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--data", required=True, help="dataset directory")
    density_flags(p)

    p = command("lse", cmd_lse, "score the linear state estimator on a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--stats-from", help="training dataset whose label statistics define Total MAE")

    p = command("topo-scan", cmd_topo_scan, "rank single-line outages and optionally score models on them")
    p.add_argument("--top-k", type=_positive_int, default=5)
    p.add_argument("--pin-paper-lines", action="store_true", help="use the fixed MIT/LIT line lists")
    p.add_argument("--gnn", help="trained GNN model file")
    p.add_argument("--dnn", help="trained DNN model file")
    p.add_argument("--train-data", help="training dataset of the models")
    p.add_argument("--samples", type=_positive_int, default=500, help="test samples per topology")
    p.add_argument("--noise", default="gmm")
    p.add_argument("--seed", type=_nonneg_int, default=2)
    density_flags(p)

    p = command("report", cmd_report, "merge metrics tables into the comparison table layouts", case=False)
    p.add_argument("--inputs", nargs="+", required=True, help="metrics.csv files or directories holding one")
    p.add_argument("--topologies", help="topologies.json from topo-scan, to label MIT/LIT rows")
    return parser


def _subparsers(parser: argparse.ArgumentParser) -> dict:
    action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    return action.choices


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> None:
    """Install ``--config`` values as defaults of the chosen subcommand before parsing."""
    subs = _subparsers(parser)
    command = next((a for a in argv if a in subs), None)
    path = None
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            path = argv[i + 1]
        elif a.startswith("--config="):
            path = a.split("=", 1)[1]
    if command is None or path is None:
        return
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(f"cannot read --config {path}: {exc}")
    if not isinstance(doc, dict):
        parser.error("--config must hold a JSON object")
    sub = subs[command]
    known = {a.dest for a in sub._actions}
    flat = {k.replace("-", "_"): v for k, v in doc.items() if not isinstance(v, dict)}
    section = {k.replace("-", "_"): v for k, v in doc.get(command, {}).items()}
    unknown = sorted(set(section) - known)
    if unknown:
        parser.error(f"--config: unknown keys for {command}: {', '.join(unknown)}")
    defaults = {k: v for k, v in {**flat, **section}.items() if k in known and k not in ("config", "func")}
    for action in sub._actions:
        if action.dest in defaults:
            action.required = False
    sub.set_defaults(**defaults)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    _apply_config(parser, argv)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, CaseError, ValueError, OSError, np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"gnnse {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
