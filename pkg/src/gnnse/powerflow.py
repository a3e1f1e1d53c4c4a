"""Load scenarios, Newton-Raphson AC power flow, branch flows and datasets."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .grid_model import (NetworkCase, branch_matrices, build_adjacency, build_ybus,
                         is_connected, line_label)
from .measurement import (MeasurementLayout, NoiseModel, PmuPlacement, build_feature_matrix,
                          measurement_layout, synthesize_measurements)

log = logging.getLogger(__name__)


class PowerFlowError(RuntimeError):
    pass


class DisconnectedError(PowerFlowError):
    pass


# ------------------------------------------------------------------ scenarios

@dataclass(frozen=True)
class ScenarioConfig:
    global_lo: float = 0.8
    global_hi: float = 1.2
    bus_lo: float = 0.95
    bus_hi: float = 1.05

    def __post_init__(self):
        if not (0 < self.global_lo <= self.global_hi and 0 < self.bus_lo <= self.bus_hi):
            raise ValueError("scenario bounds must satisfy 0 < lo <= hi")


@dataclass(frozen=True)
class LoadScenario:
    bus_mult: np.ndarray
    global_mult: float = 1.0
    seed: Optional[int] = None

    @classmethod
    def nominal(cls, case: NetworkCase) -> "LoadScenario":
        return cls(np.ones(case.n_bus), 1.0)


def sample_load_scenario(case: NetworkCase, rng: np.random.Generator,
                         cfg: ScenarioConfig = ScenarioConfig(), seed: Optional[int] = None) -> LoadScenario:
    """Global multiplier times independent per-bus multipliers.

    Q follows P (constant power factor); PV dispatch follows the global
    multiplier and the slack takes the rest.
    """
    g = rng.uniform(cfg.global_lo, cfg.global_hi)
    per_bus = rng.uniform(cfg.bus_lo, cfg.bus_hi, case.n_bus)
    return LoadScenario(per_bus, float(g), seed)


def bus_injections(case: NetworkCase, scenario: Optional[LoadScenario] = None) -> np.ndarray:
    """Scheduled complex injections in pu (generation minus load)."""
    scenario = scenario or LoadScenario.nominal(case)
    pl = np.array([b.p_load for b in case.buses])
    ql = np.array([b.q_load for b in case.buses])
    pg = np.array([b.p_gen for b in case.buses])
    load = scenario.global_mult * scenario.bus_mult
    return (pg * scenario.global_mult - pl * load - 1j * ql * load) / case.base_mva


# ----------------------------------------------------------------- solution

@dataclass
class PowerFlowSolution:
    vm: np.ndarray
    va: np.ndarray
    converged: bool
    iterations: int
    max_mismatch: float
    outage: Optional[int] = None

    @property
    def V(self) -> np.ndarray:
        return self.vm * np.exp(1j * self.va)


def bus_types(case: NetworkCase):
    kinds = np.array([b.kind for b in case.buses])
    pv = np.flatnonzero(kinds == "pv")
    pq = np.flatnonzero(kinds == "pq")
    return case.slack_index, pv, pq


def power_mismatch(ybus, V: np.ndarray, sbus: np.ndarray) -> np.ndarray:
    return V * np.conj(ybus @ V) - sbus


def mismatch_vector(ybus, V, sbus, pvpq, pq) -> np.ndarray:
    mis = power_mismatch(ybus, V, sbus)
    return np.r_[mis.real[pvpq], mis.imag[pq]]


def power_jacobian(ybus, V: np.ndarray, pvpq: np.ndarray, pq: np.ndarray) -> sp.csr_matrix:
    """Jacobian of ``mismatch_vector`` w.r.t. ``(va[pvpq], vm[pq])``."""
    ibus = ybus @ V
    dV = sp.diags(V)
    dVn = sp.diags(V / np.abs(V))
    dS_dVm = dV @ np.conj(ybus @ dVn) + sp.diags(np.conj(ibus)) @ dVn
    dS_dVa = 1j * dV @ np.conj(sp.diags(ibus) - ybus @ dV)
    dS_dVa, dS_dVm = sp.csr_matrix(dS_dVa), sp.csr_matrix(dS_dVm)
    j11 = dS_dVa[pvpq][:, pvpq].real
    j12 = dS_dVm[pvpq][:, pq].real
    j21 = dS_dVa[pq][:, pvpq].imag
    j22 = dS_dVm[pq][:, pq].imag
    return sp.vstack([sp.hstack([j11, j12]), sp.hstack([j21, j22])], format="csr")


def solve_power_flow(case: NetworkCase, scenario: Optional[LoadScenario] = None,
                     outage: Optional[int] = None, v0: Optional[np.ndarray] = None,
                     tol: float = 1e-8, max_iter: int = 30) -> PowerFlowSolution:
    """Full Newton-Raphson in polar coordinates.

    Starts flat (setpoints on PV/slack, 1 pu elsewhere, slack reference angle)
    unless ``v0`` is given. PV reactive limits are not enforced. A
    non-converged run comes back with ``converged=False`` rather than raising.
    """
    if not is_connected(build_adjacency(case, outage)):
        raise DisconnectedError(f"topology with outage {outage} is disconnected")
    ybus = build_ybus(case, outage)
    sbus = bus_injections(case, scenario)
    ref, pv, pq = bus_types(case)
    pvpq = np.r_[pv, pq]

    if v0 is None:
        vm = np.array([b.v_setpoint if b.kind != "pq" else 1.0 for b in case.buses])
        va = np.full(case.n_bus, case.buses[ref].va_init)
    else:
        vm, va = np.abs(v0).astype(float), np.angle(v0).astype(float)
        for i in np.r_[ref, pv]:
            vm[i] = case.buses[i].v_setpoint
        va[ref] = case.buses[ref].va_init
    V = vm * np.exp(1j * va)

    npv = pv.size
    F = mismatch_vector(ybus, V, sbus, pvpq, pq)
    err = np.abs(F).max(initial=0.0)
    it = 0
    while err >= tol and it < max_iter:
        J = power_jacobian(ybus, V, pvpq, pq)
        dx = -spsolve(J.tocsc(), F)
        va[pvpq] += dx[: npv + pq.size]
        vm[pq] += dx[npv + pq.size:]
        V = vm * np.exp(1j * va)
        it += 1
        F = mismatch_vector(ybus, V, sbus, pvpq, pq)
        err = np.abs(F).max()
        if not np.isfinite(err):
            break
    converged = bool(err < tol)
    if not converged:
        log.debug("power flow did not converge: %d iterations, mismatch %.3e", it, err)
    return PowerFlowSolution(np.abs(V), np.angle(V), converged, it, float(err), outage)


# --------------------------------------------------------------------- flows

@dataclass(frozen=True)
class BranchFlow:
    branch: int
    p_from: float
    q_from: float
    p_to: float
    q_to: float


def branch_flow_arrays(case: NetworkCase, sol: PowerFlowSolution):
    """Complex from-end and to-end flows in MVA; zero for out-of-service branches."""
    yf, yt = branch_matrices(case, sol.outage)
    V = sol.V
    f, t = case.branch_ends()
    sf = V[f] * np.conj(yf @ V) * case.base_mva
    st = V[t] * np.conj(yt @ V) * case.base_mva
    return sf, st


def branch_flows(case: NetworkCase, sol: PowerFlowSolution) -> list[BranchFlow]:
    sf, st = branch_flow_arrays(case, sol)
    return [BranchFlow(k, sf[k].real, sf[k].imag, st[k].real, st[k].imag) for k in range(case.n_branch)]


# ------------------------------------------------------------------- datasets

def topology_id(case: NetworkCase, outage: Optional[int]) -> str:
    return "base" if outage is None else f"outage:{line_label(case, outage)}"


@dataclass
class Dataset:
    case_id: str
    case_hash: str
    topology: str
    outage: Optional[int]
    features: np.ndarray
    labels: np.ndarray
    noise: dict
    seed: int
    placement: tuple[int, ...]
    measurements: Optional[np.ndarray] = None
    redraws: int = 0
    scenario: dict = field(default_factory=dict)

    def __len__(self):
        return self.features.shape[0]

    @property
    def n_bus(self) -> int:
        return self.features.shape[1]

    def manifest(self) -> dict:
        dims = {"features": list(self.features.shape), "labels": list(self.labels.shape)}
        if self.measurements is not None:
            dims["measurements"] = list(self.measurements.shape)
        doc = {
            "case": self.case_id, "case_hash": self.case_hash, "topology": self.topology,
            "outage": self.outage, "n": len(self), "noise": self.noise, "seed": self.seed,
            "dims": dims, "placement": list(self.placement), "redraws": self.redraws,
            "scenario": self.scenario, "dtype": "<f8",
        }
        doc["config_hash"] = config_hash({k: doc[k] for k in ("case_hash", "topology", "n", "noise",
                                                              "seed", "placement", "scenario")})
        return doc

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        _write_block(d / "features.bin", self.features)
        _write_block(d / "labels.bin", self.labels)
        if self.measurements is not None:
            _write_block(d / "measurements.bin", self.measurements)
        (d / "manifest.json").write_text(json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n")
        return d

    @classmethod
    def load(cls, directory) -> "Dataset":
        d = Path(directory)
        man = json.loads((d / "manifest.json").read_text())
        dims = man["dims"]
        meas = None
        if "measurements" in dims:
            meas = _read_block(d / "measurements.bin", dims["measurements"])
        return cls(
            case_id=man["case"], case_hash=man["case_hash"], topology=man["topology"],
            outage=man["outage"], features=_read_block(d / "features.bin", dims["features"]),
            labels=_read_block(d / "labels.bin", dims["labels"]), noise=man["noise"],
            seed=man["seed"], placement=tuple(man["placement"]), measurements=meas,
            redraws=man.get("redraws", 0), scenario=man.get("scenario", {}),
        )


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def _write_block(path: Path, arr: np.ndarray) -> None:
    path.write_bytes(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_block(path: Path, shape) -> np.ndarray:
    arr = np.frombuffer(path.read_bytes(), dtype="<f8")
    if arr.size != int(np.prod(shape)):
        raise ValueError(f"{path.name}: expected {int(np.prod(shape))} values, found {arr.size}")
    return arr.reshape(shape).astype(np.float64)


def sample_stream(seed: int, index: int, attempt: int, purpose: int) -> np.random.Generator:
    """Independent generator per (seed, sample, redraw, purpose)."""
    return np.random.default_rng([seed, index, attempt, purpose])


class RedrawLimitError(PowerFlowError):
    pass


def generate_dataset(case: NetworkCase, n_samples: int, noise: NoiseModel, placement: PmuPlacement,
                     seed: int, outage: Optional[int] = None,
                     scenario_cfg: ScenarioConfig = ScenarioConfig(),
                     current_noise: Optional[NoiseModel] = None,
                     keep_measurements: bool = True) -> Dataset:
    """Draw scenarios, solve them, and turn the solutions into noisy node features.

    Scenario ``i`` depends only on ``(seed, i)`` so datasets with different
    noise models or topologies share their load draws. Non-converging draws
    are redrawn, up to 1% of ``n_samples``.
    """
    layout: MeasurementLayout = measurement_layout(case, placement, outage)
    n = case.n_bus
    feats = np.empty((n_samples, n, 2))
    labels = np.empty((n_samples, n, 2))
    meas = np.empty((n_samples, layout.n_meas)) if keep_measurements else None
    cap = max(1, n_samples // 100)
    redraws = 0
    for i in range(n_samples):
        attempt = 0
        while True:
            sc = sample_load_scenario(case, sample_stream(seed, i, attempt, 0), scenario_cfg)
            sol = solve_power_flow(case, sc, outage)
            if sol.converged:
                break
            redraws += 1
            attempt += 1
            if redraws > cap:
                raise RedrawLimitError(f"more than {cap} non-converging scenarios")
        ms = synthesize_measurements(sol, case, placement, noise, sample_stream(seed, i, attempt, 1),
                                     current_noise=current_noise, layout=layout)
        feats[i] = build_feature_matrix(ms)
        labels[i, :, 0] = sol.vm
        labels[i, :, 1] = sol.va
        if meas is not None:
            meas[i] = ms.as_vector()
    return Dataset(
        case_id=case.name or "case", case_hash=case.content_hash(),
        topology=topology_id(case, outage), outage=outage, features=feats, labels=labels,
        noise=noise.to_dict(), seed=seed, placement=tuple(placement.buses), measurements=meas,
        redraws=redraws, scenario=scenario_cfg.__dict__.copy(),
    )
