"""Metrics, outage ranking, error densities and the noise/topology studies."""
from __future__ import annotations

import csv
import json
import logging
import subprocess
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .grid_model import NetworkCase, build_adjacency, is_connected, line_label, parse_line_list
from .measurement import (DEFAULT_GAUSSIAN, DEFAULT_GMM, NoiseModel, ObservabilityError, PlacementError,
                          PmuPlacement, auto_placement, build_H, noise_from_dict, solve_lse)
from .nn import Normalizer, TrainConfig, new_model, predict, train
from .nn.models import STD_FLOOR, Model
from .powerflow import (Dataset, LoadScenario, PowerFlowError, ScenarioConfig, branch_flow_arrays,
                        config_hash, generate_dataset, solve_power_flow)

log = logging.getLogger(__name__)

STUDY_MIT_LINES = ("8-5", "30-17", "26-30", "38-37", "64-65")
STUDY_LIT_LINES = ("24-70", "56-58", "100-101", "14-15", "32-113")


# ------------------------------------------------------------------- metrics

@dataclass
class MetricsReport:
    """Error summary for one estimator on one test set.

    Angles in degrees, MAPE in percent. ``n_excluded`` counts zero-magnitude
    labels left out of MAPE; ``n_constant`` counts outputs with no spread in
    the training labels, which have no z-score and are left out of Total MAE.
    """

    estimator: str
    noise: str
    topology: str
    mae_angle: float
    mape_magnitude: float
    r2_angle: float
    r2_magnitude: float
    total_mae_normalized: float
    n_samples: int
    n_excluded: int = 0
    n_constant: int = 0

    def row(self) -> dict:
        return asdict(self)


def stats_in_degrees(norm: Normalizer) -> Normalizer:
    """Convert (pu, radian) output statistics to (pu, degree); floored stds stay at the floor."""
    mean, std = norm.mean.copy(), norm.std.copy()
    mean[..., 1] = np.rad2deg(mean[..., 1])
    std[..., 1] = np.where(std[..., 1] > STD_FLOOR, np.rad2deg(std[..., 1]), STD_FLOOR)
    return Normalizer(mean, std)


def label_stats(labels: np.ndarray) -> Normalizer:
    """Per-output statistics of (pu, radian) training labels, expressed in (pu, degrees).

    Identical to converting a trained model's output normaliser.
    """
    return stats_in_degrees(Normalizer.fit(np.asarray(labels, dtype=float)))


def labels_in_degrees(labels: np.ndarray) -> np.ndarray:
    out = np.array(labels, dtype=float)
    out[..., 1] = np.rad2deg(out[..., 1])
    return out


def _r2(pred: np.ndarray, label: np.ndarray) -> float:
    ss_res = np.sum((label - pred) ** 2)
    ss_tot = np.sum((label - label.mean()) ** 2)
    if ss_tot == 0:
        return 1.0 if ss_res == 0 else float("-inf")
    return float(1.0 - ss_res / ss_tot)


def compute_metrics(preds: np.ndarray, labels: np.ndarray, stats: Optional[Normalizer] = None,
                    estimator: str = "", noise: str = "", topology: str = "base") -> MetricsReport:
    """Compare (samples, n, 2) estimates against labels, both in (pu, degrees).

    R² uses the mean over the whole block (all samples and nodes). Total MAE
    z-scores every output with ``stats`` (training statistics; the labels'
    own statistics when omitted).
    """
    preds = np.asarray(preds, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if preds.shape != labels.shape:
        raise ValueError(f"prediction shape {preds.shape} != label shape {labels.shape}")
    if labels.ndim == 2:
        preds, labels = preds[None], labels[None]
    vm, vm_hat = labels[..., 0], preds[..., 0]
    va, va_hat = labels[..., 1], preds[..., 1]
    nonzero = vm != 0
    n_excluded = int(np.sum(~nonzero))
    mape = float(100.0 * np.mean(np.abs((vm - vm_hat)[nonzero] / vm[nonzero]))) if nonzero.any() else float("nan")
    if stats is None:
        stats = Normalizer.fit(labels)
    varying = stats.std > STD_FLOOR
    z_err = np.abs(stats.apply(preds) - stats.apply(labels))[:, varying]
    return MetricsReport(
        estimator=estimator, noise=noise, topology=topology,
        mae_angle=float(np.mean(np.abs(va - va_hat))),
        mape_magnitude=mape,
        r2_angle=_r2(va_hat, va),
        r2_magnitude=_r2(vm_hat, vm),
        total_mae_normalized=float(z_err.mean()) if z_err.size else 0.0,
        n_samples=labels.shape[0],
        n_excluded=n_excluded,
        n_constant=int(np.sum(~varying)),
    )


# ------------------------------------------------------------- error density

@dataclass
class ErrorDensity:
    """Histogram of per-sample errors; ``edges`` has ``len(counts) + 1`` entries."""

    edges: np.ndarray
    counts: np.ndarray
    quantity: str = ""
    estimator: str = ""
    topology: str = ""

    def rows(self):
        for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
            yield {"bin_left": float(lo), "bin_right": float(hi), "count": int(c)}


def error_density(errors, lo: float, hi: float, bins: int, **labels) -> ErrorDensity:
    """Fixed-width histogram on [lo, hi]; values outside land in the edge bins."""
    errors = np.asarray(errors, dtype=float).ravel()
    if errors.size == 0:
        raise ValueError("error_density needs at least one value")
    if not hi > lo or bins < 1:
        raise ValueError("need hi > lo and at least one bin")
    edges = np.linspace(lo, hi, bins + 1)
    idx = np.clip(np.floor((errors - lo) / (hi - lo) * bins).astype(int), 0, bins - 1)
    return ErrorDensity(edges, np.bincount(idx, minlength=bins), **labels)


def sample_errors(preds: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample signed mean error over buses: (magnitude pu, angle degrees)."""
    d = np.asarray(preds) - np.asarray(labels)
    return d[..., 0].mean(axis=-1), d[..., 1].mean(axis=-1)


# ------------------------------------------------------------ outage ranking

@dataclass(frozen=True)
class OutageImpact:
    branch: int
    from_bus: int
    to_bus: int
    impact_score: float  # MW
    connected: bool
    converged: bool = True

    @property
    def ranked(self) -> bool:
        return self.connected and self.converged

    @property
    def label(self) -> str:
        return f"{self.from_bus}-{self.to_bus}"


def rank_outages(case: NetworkCase, scenario: Optional[LoadScenario] = None) -> list[OutageImpact]:
    """Score every single-branch outage by the total change in from-end MW flow elsewhere.

    Ranked outages come first, highest impact first, ties by branch index.
    Outages that disconnect the grid or fail to converge follow with a zero
    score, in branch order.
    """
    base = solve_power_flow(case, scenario)
    if not base.converged:
        raise PowerFlowError("base case did not converge")
    p_base = branch_flow_arrays(case, base)[0].real
    in_service = case.in_service_mask()
    ranked, flagged = [], []
    for k in np.flatnonzero(in_service):
        br = case.branches[k]
        if not is_connected(build_adjacency(case, k)):
            flagged.append(OutageImpact(int(k), br.from_bus, br.to_bus, 0.0, False, False))
            continue
        sol = solve_power_flow(case, scenario, outage=int(k), v0=base.V)
        if not sol.converged:
            flagged.append(OutageImpact(int(k), br.from_bus, br.to_bus, 0.0, True, False))
            continue
        p = branch_flow_arrays(case, sol)[0].real
        keep = in_service.copy()
        keep[k] = False
        score = float(np.sum(np.abs(p[keep] - p_base[keep])))
        ranked.append(OutageImpact(int(k), br.from_bus, br.to_bus, score, True, True))
    ranked.sort(key=lambda o: (-o.impact_score, o.branch))
    return ranked + flagged


def select_outages(impacts: Sequence[OutageImpact], k: int = 5) -> tuple[list[int], list[int]]:
    """(most impactful, least impactful) branch indices among ranked outages."""
    ok = [o.branch for o in impacts if o.ranked]
    return ok[:k], ok[::-1][:k]


# ------------------------------------------------------------------- studies

@dataclass
class StudyConfig:
    n_train: int = 2000
    n_test: int = 500
    epochs: int = 200
    lr: float = 1e-3
    batch_size: int = 32
    hidden_gnn: int = 64
    hidden_mlp: int = 200
    model_seed: int = 0
    train_seed: int = 1
    test_seed: int = 2
    noises: dict = field(default_factory=lambda: {"gaussian": DEFAULT_GAUSSIAN.to_dict(),
                                                  "gmm": DEFAULT_GMM.to_dict()})
    topology_noise: str = "gmm"
    top_k: int = 5
    pin_paper_lines: bool = True
    mag_range: float = 0.005  # pu, density half-width
    ang_range: float = 0.5  # degrees
    bins: int = 50
    scenario: dict = field(default_factory=lambda: asdict(ScenarioConfig()))

    def noise(self, name: str) -> NoiseModel:
        return noise_from_dict(self.noises[name])

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, lr=self.lr, batch_size=self.batch_size, seed=self.model_seed)

    def hash(self) -> str:
        return config_hash(asdict(self))


ARCHS = ("gnn", "mlp")


def fit_estimator(arch: str, train_set: Dataset, case: NetworkCase, cfg: StudyConfig,
                  progress: Optional[Callable] = None) -> Model:
    hidden = cfg.hidden_gnn if arch == "gnn" else cfg.hidden_mlp
    model = new_model(arch, case.n_bus, cfg.model_seed, hidden=hidden)
    adj = build_adjacency(case) if arch == "gnn" else None
    train(model, train_set.features, train_set.labels, adj, cfg.train_config(), progress=progress)
    record_training_data(model, train_set)
    return model


def record_training_data(model: Model, data: Dataset) -> None:
    """Stamp the model with what it was trained on, for later consistency checks."""
    man = data.manifest()
    model.meta.update({"dataset": man["config_hash"], "case_hash": man["case_hash"],
                       "placement": man["placement"], "noise": man["noise"]})


def lse_estimate(case: NetworkCase, placement: PmuPlacement, data: Dataset) -> np.ndarray:
    """(samples, n, 2) LSE estimates in (pu, degrees); raises ObservabilityError."""
    if data.measurements is None:
        raise ValueError("dataset carries no raw measurements")
    vm, va = solve_lse(build_H(case, placement, data.outage), data.measurements)
    return np.stack([vm, np.rad2deg(va)], axis=-1)


def model_estimate(model: Model, case: NetworkCase, data: Dataset) -> np.ndarray:
    adj = build_adjacency(case, data.outage) if model.arch == "gnn" else None
    return predict(model, data.features, adj)


@dataclass
class NoiseStudyResult:
    reports: list[MetricsReport]
    models: dict  # (arch, noise) -> Model
    train_sets: dict
    test_sets: dict

    def get(self, estimator: str, noise: str) -> MetricsReport:
        return next(r for r in self.reports if r.estimator == estimator and r.noise == noise)


def run_noise_study(case: NetworkCase, placement: PmuPlacement, cfg: StudyConfig = StudyConfig(),
                    noises: Optional[Sequence[str]] = None, progress: Optional[Callable] = None) -> NoiseStudyResult:
    """Train GNN and MLP per noise model on the base topology; score them and LSE."""
    scen = ScenarioConfig(**cfg.scenario)
    reports, models, train_sets, test_sets = [], {}, {}, {}
    for name in noises or list(cfg.noises):
        noise = cfg.noise(name)
        tr = generate_dataset(case, cfg.n_train, noise, placement, cfg.train_seed, scenario_cfg=scen,
                              keep_measurements=False)
        te = generate_dataset(case, cfg.n_test, noise, placement, cfg.test_seed, scenario_cfg=scen)
        train_sets[name], test_sets[name] = tr, te
        stats = label_stats(tr.labels)
        truth = labels_in_degrees(te.labels)
        reports.append(compute_metrics(lse_estimate(case, placement, te), truth, stats, "lse", name))
        for arch in ARCHS:
            log.info("training %s on %s noise", arch, name)
            cb = (lambda e, l, v, a=arch: progress(a, name, e, l)) if progress else None
            model = fit_estimator(arch, tr, case, cfg, cb)
            models[arch, name] = model
            reports.append(compute_metrics(model_estimate(model, case, te), truth, stats, arch, name))
    return NoiseStudyResult(reports, models, train_sets, test_sets)


@dataclass
class TopologyStudyResult:
    reports: list[MetricsReport]
    densities: list[ErrorDensity]
    groups: dict  # topology id -> ("MIT"|"LIT", index)
    skipped: list[tuple[str, str, str]]  # (topology, estimator, reason)

    def total_mae(self, estimator: str, topology: str) -> float:
        return next(r.total_mae_normalized for r in self.reports
                    if r.estimator == estimator and r.topology == topology)


def default_placement(case: NetworkCase) -> PmuPlacement:
    """Greedy placement that stays observable under the pinned study outages when the case has them."""
    try:
        lines = parse_line_list(case, STUDY_MIT_LINES + STUDY_LIT_LINES)
    except ValueError:
        lines = []
    return auto_placement(case, lines)


def study_lines(case: NetworkCase, cfg: StudyConfig, impacts=None) -> tuple[list[int], list[int]]:
    if cfg.pin_paper_lines:
        return parse_line_list(case, STUDY_MIT_LINES), parse_line_list(case, STUDY_LIT_LINES)
    return select_outages(impacts if impacts is not None else rank_outages(case), cfg.top_k)


def run_topology_study(case: NetworkCase, placement: PmuPlacement, models: dict, train_labels: np.ndarray,
                       cfg: StudyConfig = StudyConfig(), lines=None) -> TopologyStudyResult:
    """Score base-trained models on single-outage test sets, without retraining.

    ``models`` maps architecture name to a trained model; the GNN sees the
    post-outage adjacency. ``train_labels`` (radians) fix the Total MAE
    statistics for every topology.
    """
    mit, lit = lines if lines is not None else study_lines(case, cfg)
    noise = cfg.noise(cfg.topology_noise)
    stats = label_stats(train_labels)
    scen = ScenarioConfig(**cfg.scenario)
    reports, densities, groups, skipped = [], [], {}, []
    for group, ks in (("MIT", mit), ("LIT", lit)):
        for j, k in enumerate(ks, start=1):
            topo = line_label(case, k)
            groups[topo] = (group, j)
            try:
                te = generate_dataset(case, cfg.n_test, noise, placement, cfg.test_seed, outage=k,
                                      scenario_cfg=scen)
            except (PlacementError, PowerFlowError) as exc:
                skipped.append((topo, "all", str(exc)))
                continue
            truth = labels_in_degrees(te.labels)
            estimates = {arch: model_estimate(m, case, te) for arch, m in models.items()}
            try:
                estimates["lse"] = lse_estimate(case, placement, te)
            except ObservabilityError as exc:
                skipped.append((topo, "lse", str(exc)))
            for name, est in estimates.items():
                reports.append(compute_metrics(est, truth, stats, name, cfg.topology_noise, topo))
                if name == "lse":
                    continue
                e_mag, e_ang = sample_errors(est, truth)
                densities.append(error_density(e_mag, -cfg.mag_range, cfg.mag_range, cfg.bins,
                                               quantity="magnitude", estimator=name, topology=topo))
                densities.append(error_density(e_ang, -cfg.ang_range, cfg.ang_range, cfg.bins,
                                               quantity="angle", estimator=name, topology=topo))
    return TopologyStudyResult(reports, densities, groups, skipped)


# ------------------------------------------------------------------- reports

METRIC_FIELDS = ["estimator", "noise", "topology", "mae_angle", "mape_magnitude", "r2_angle",
                 "r2_magnitude", "total_mae_normalized", "n_samples", "n_excluded", "n_constant"]


def commit_id() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 else "unknown"


def write_sidecar(path, seeds: dict, cfg_hash: str, extra: Optional[dict] = None) -> Path:
    side = Path(str(path) + ".json")
    doc = {"file": Path(path).name, "seeds": seeds, "config_hash": cfg_hash, "commit": commit_id()}
    doc.update(extra or {})
    side.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return side


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_csv(path, rows: Sequence[dict], fields: Sequence[str]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in fields})
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_metrics(path, reports: Sequence[MetricsReport]) -> Path:
    return write_csv(path, [r.row() for r in reports], METRIC_FIELDS)


def write_density(path, density: ErrorDensity) -> Path:
    return write_csv(path, list(density.rows()), ["bin_left", "bin_right", "count"])


def density_name(d: ErrorDensity) -> str:
    topo = d.topology.replace("outage:", "").replace("-", "_") or "base"
    return f"density_{d.estimator}_{topo}_{d.quantity}.csv"


def write_ranking(path, impacts: Sequence[OutageImpact]) -> Path:
    rows = []
    rank = 0
    for o in impacts:
        if o.ranked:
            rank += 1
        status = "ok" if o.ranked else ("disconnected" if not o.connected else "not-converged")
        rows.append({"rank": rank if o.ranked else "", "branch": o.branch, "from_bus": o.from_bus,
                     "to_bus": o.to_bus, "impact_mw": o.impact_score, "status": status})
    return write_csv(path, rows, ["rank", "branch", "from_bus", "to_bus", "impact_mw", "status"])


TABLE1_FIELDS = ["noise", "estimator", "mae_angle_deg", "mape_magnitude_pct"]
TABLE2_FIELDS = ["estimator", "mae_angle_deg", "mape_magnitude_pct", "r2_angle", "r2_magnitude"]
TABLE3_FIELDS = ["group", "topology", "removed_line", "total_mae_dnn", "total_mae_gnn"]


def _label(est: str) -> str:
    return {"mlp": "DNN", "dnn": "DNN", "gnn": "GNN", "lse": "LSE"}.get(est, est)


def table_rows(metric_rows: Sequence[dict], groups: Optional[dict] = None) -> dict[str, list[dict]]:
    """Arrange metric rows into the three comparison tables.

    Table 1: LSE vs GNN per noise model on the base topology. Table 2: DNN vs
    GNN under GMM noise. Table 3: Total MAE of DNN and GNN per outaged topology.
    """
    base = [r for r in metric_rows if r["topology"] == "base"]
    t1 = [{"noise": r["noise"], "estimator": _label(r["estimator"]), "mae_angle_deg": r["mae_angle"],
           "mape_magnitude_pct": r["mape_magnitude"]}
          for r in base if r["estimator"] in ("lse", "gnn")]
    t2 = [{"estimator": _label(r["estimator"]), "mae_angle_deg": r["mae_angle"],
           "mape_magnitude_pct": r["mape_magnitude"], "r2_angle": r["r2_angle"],
           "r2_magnitude": r["r2_magnitude"]}
          for r in base if r["noise"] == "gmm" and r["estimator"] in ("mlp", "dnn", "gnn")]
    t2.sort(key=lambda r: r["estimator"] != "DNN")
    by_topo: dict[str, dict] = {}
    for r in metric_rows:
        if r["topology"] == "base" or r["estimator"] == "lse":
            continue
        entry = by_topo.setdefault(r["topology"], {})
        entry["total_mae_" + _label(r["estimator"]).lower()] = r["total_mae_normalized"]
    t3 = []
    groups = groups or {}
    for topo, vals in by_topo.items():
        group, j = groups.get(topo, ("", 0))
        t3.append({"group": group, "topology": f"{group}_{j}" if group else "",
                   "removed_line": topo.replace("outage:", ""), **vals})
    order = {"LIT": 0, "MIT": 1, "": 2}
    t3.sort(key=lambda r: (order.get(r["group"], 2), r["topology"], r["removed_line"]))
    return {"table1": t1, "table2": t2, "table3": t3}
