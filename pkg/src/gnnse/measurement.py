"""PMU placement, synthetic phasor measurements, node features and the LSE baseline."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Union

import numpy as np
from scipy.linalg import solve_triangular

from .grid_model import NetworkCase, branch_admittances, build_adjacency


class PlacementError(ValueError):
    """A bus is neither hosting a PMU nor adjacent to one."""


class ObservabilityError(np.linalg.LinAlgError):
    """The LSE measurement matrix lost column rank."""


# ------------------------------------------------------------------ placement

@dataclass(frozen=True)
class PmuPlacement:
    buses: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(sorted(int(b) for b in self.buses)))

    def __len__(self):
        return len(self.buses)

    def indices(self, case: NetworkCase) -> np.ndarray:
        return np.array([case.index[b] for b in self.buses], dtype=int)

    def to_json(self) -> str:
        return json.dumps(list(self.buses))

    @classmethod
    def from_json(cls, text: str) -> "PmuPlacement":
        ids = json.loads(text)
        if not isinstance(ids, list):
            raise ValueError("placement file must hold a JSON array of bus ids")
        return cls(tuple(int(i) for i in ids))


def uncovered_nodes(adj: np.ndarray, chosen) -> np.ndarray:
    """Indices of nodes that are neither chosen nor adjacent to a chosen node."""
    adj = np.asarray(adj)
    covered = np.zeros(adj.shape[0], dtype=bool)
    chosen = np.asarray(list(chosen), dtype=int)
    covered[chosen] = True
    if chosen.size:
        covered |= adj[chosen].any(axis=0)
    return np.flatnonzero(~covered)


def place_pmus(adj, bus_ids=None, extra_adjs=()) -> PmuPlacement:
    """Greedy dominating set.

    Repeatedly picks the node covering the most still-uncovered nodes; ties go
    to the lower bus id. With ``extra_adjs`` the set must dominate every
    listed graph too (e.g. post-outage topologies), and the gain counts
    uncovered (node, graph) pairs.
    """
    graphs = [np.asarray(a).astype(bool) for a in (adj, *extra_adjs)]
    n = graphs[0].shape[0]
    ids = np.arange(n) if bus_ids is None else np.asarray(bus_ids)
    closed = [g | np.eye(n, dtype=bool) for g in graphs]
    uncovered = [np.ones(n, dtype=bool) for _ in graphs]
    chosen: list[int] = []
    order = np.argsort(ids, kind="stable")
    while any(u.any() for u in uncovered):
        gain = sum(c[:, u].sum(axis=1) for c, u in zip(closed, uncovered))
        best = gain[order].max()
        pick = order[np.flatnonzero(gain[order] == best)[0]]
        chosen.append(int(pick))
        for c, u in zip(closed, uncovered):
            u &= ~c[pick]
    for g in graphs:
        if uncovered_nodes(g, chosen).size:
            raise AssertionError("greedy placement failed to dominate the graph")
    return PmuPlacement(tuple(int(ids[i]) for i in chosen))


def auto_placement(case: NetworkCase, outages=()) -> PmuPlacement:
    """Greedy placement on the base topology, also covering any listed outages."""
    extra = [build_adjacency(case, k) for k in outages]
    return place_pmus(build_adjacency(case), case.bus_ids, extra)


# ----------------------------------------------------------------------- noise

@dataclass(frozen=True)
class GaussianNoise:
    """Zero-mean Gaussian; magnitude std in percent of reading, angle std in degrees."""

    std_mag: float = 0.2
    std_ang: float = 0.1

    def __post_init__(self):
        if self.std_mag < 0 or self.std_ang < 0:
            raise ValueError("noise std must be non-negative")

    def to_dict(self) -> dict:
        return {"type": "gaussian", "std_mag": self.std_mag, "std_ang": self.std_ang}


@dataclass(frozen=True)
class Gmm2Noise:
    """Two-component Gaussian mixture (percent / degrees)."""

    means_mag: tuple[float, float] = (-0.4, 0.6)
    means_ang: tuple[float, float] = (-0.2, 0.3)
    stds_mag: tuple[float, float] = (0.25, 0.25)
    stds_ang: tuple[float, float] = (0.12, 0.12)
    weights: tuple[float, float] = (0.4, 0.6)

    def __post_init__(self):
        for name in ("means_mag", "means_ang", "stds_mag", "stds_ang", "weights"):
            val = tuple(float(v) for v in getattr(self, name))
            if len(val) != 2:
                raise ValueError(f"{name} needs two components")
            object.__setattr__(self, name, val)
        if min(self.stds_mag + self.stds_ang) <= 0:
            raise ValueError("GMM component stds must be positive")
        if min(self.weights) < 0 or abs(sum(self.weights) - 1.0) > 1e-12:
            raise ValueError("GMM weights must be non-negative and sum to 1")

    def moments(self, kind: str) -> tuple[float, float]:
        """Analytic mean and variance of the mixture."""
        w = np.array(self.weights)
        mu = np.array(self.means_mag if kind == "magnitude" else self.means_ang)
        sd = np.array(self.stds_mag if kind == "magnitude" else self.stds_ang)
        mean = float(w @ mu)
        return mean, float(w @ (sd**2 + mu**2) - mean**2)

    def to_dict(self) -> dict:
        return {"type": "gmm2", "means_mag": list(self.means_mag), "means_ang": list(self.means_ang),
                "stds_mag": list(self.stds_mag), "stds_ang": list(self.stds_ang),
                "weights": list(self.weights)}


NoiseModel = Union[GaussianNoise, Gmm2Noise]
DEFAULT_GMM = Gmm2Noise()
DEFAULT_GAUSSIAN = GaussianNoise()


def noise_from_dict(doc: dict) -> NoiseModel:
    doc = dict(doc)
    kind = doc.pop("type", None)
    if kind == "gaussian":
        return GaussianNoise(**doc)
    if kind == "gmm2":
        return Gmm2Noise(**{k: tuple(v) for k, v in doc.items()})
    raise ValueError(f"unknown noise type {kind!r}")


def parse_noise(spec: str) -> NoiseModel:
    """``"gaussian"``, ``"gmm"`` or an inline JSON object."""
    spec = spec.strip()
    if spec in ("gaussian", "gauss"):
        return DEFAULT_GAUSSIAN
    if spec in ("gmm", "gmm2", "non-gaussian"):
        return DEFAULT_GMM
    if spec in ("none", "zero"):
        return GaussianNoise(0.0, 0.0)
    return noise_from_dict(json.loads(spec))


def sample_noise(model: NoiseModel, rng: np.random.Generator, kind: str, size=None) -> np.ndarray:
    """Additive error draws: percent for ``kind="magnitude"``, degrees for ``"angle"``."""
    if kind not in ("magnitude", "angle"):
        raise ValueError(f"kind must be 'magnitude' or 'angle', got {kind!r}")
    mag = kind == "magnitude"
    if isinstance(model, GaussianNoise):
        std = model.std_mag if mag else model.std_ang
        return rng.normal(0.0, 1.0, size) * std
    comp = (rng.random(size) >= model.weights[0]).astype(int)
    mu = np.asarray(model.means_mag if mag else model.means_ang)
    sd = np.asarray(model.stds_mag if mag else model.stds_ang)
    return mu[comp] + sd[comp] * rng.normal(0.0, 1.0, size)


def corrupt(phasors: np.ndarray, model: NoiseModel, rng: np.random.Generator) -> np.ndarray:
    mag = np.abs(phasors) * (1.0 + sample_noise(model, rng, "magnitude", phasors.shape) / 100.0)
    ang = np.angle(phasors) + np.deg2rad(sample_noise(model, rng, "angle", phasors.shape))
    return mag * np.exp(1j * ang)


# -------------------------------------------------------------- measurements

@dataclass
class MeasurementLayout:
    """Which phasors are measured for a placement on one topology.

    Currents are listed per PMU bus (ascending bus index) and, within a bus,
    in branch order. For a current leaving ``at`` into branch ``branch``,
    ``I = y_self * V[at] + y_mutual * V[other]``.
    """

    n_bus: int
    pmu: np.ndarray
    branch: np.ndarray
    at: np.ndarray
    other: np.ndarray
    at_from: np.ndarray
    y_self: np.ndarray
    y_mutual: np.ndarray

    @property
    def n_meas(self) -> int:
        """Number of real measurement rows (two per phasor)."""
        return 2 * (self.pmu.size + self.branch.size)


def measurement_layout(case: NetworkCase, placement: PmuPlacement,
                       outage: Optional[int] = None) -> MeasurementLayout:
    pmu = np.sort(placement.indices(case))
    mask = case.in_service_mask(outage)
    f, t = case.branch_ends()
    yb = branch_admittances(case)
    rows = []
    for i in pmu:
        for k in np.flatnonzero(mask & ((f == i) | (t == i))):
            if f[k] == i:
                rows.append((k, i, t[k], True, yb[k, 0], yb[k, 1]))
            else:
                rows.append((k, i, f[k], False, yb[k, 3], yb[k, 2]))
    cols = list(zip(*rows)) if rows else [()] * 6
    return MeasurementLayout(
        n_bus=case.n_bus,
        pmu=pmu,
        branch=np.array(cols[0], dtype=int),
        at=np.array(cols[1], dtype=int),
        other=np.array(cols[2], dtype=int),
        at_from=np.array(cols[3], dtype=bool),
        y_self=np.array(cols[4], dtype=complex),
        y_mutual=np.array(cols[5], dtype=complex),
    )


@dataclass
class MeasurementSet:
    layout: MeasurementLayout
    v: np.ndarray
    i: np.ndarray
    v_true: np.ndarray = field(repr=False)
    i_true: np.ndarray = field(repr=False)

    def as_vector(self) -> np.ndarray:
        """Real measurement vector, interleaved (re, im) per phasor, voltages first."""
        return phasors_to_vector(self.v, self.i)


def phasors_to_vector(v: np.ndarray, i: np.ndarray) -> np.ndarray:
    c = np.concatenate([v, i], axis=-1)
    return np.stack([c.real, c.imag], axis=-1).reshape(*c.shape[:-1], -1)


def vector_to_phasors(z: np.ndarray, layout: MeasurementLayout):
    c = z[..., 0::2] + 1j * z[..., 1::2]
    p = layout.pmu.size
    return c[..., :p], c[..., p:]


def true_phasors(vm, va, layout: MeasurementLayout):
    V = np.asarray(vm) * np.exp(1j * np.asarray(va))
    return V[layout.pmu], layout.y_self * V[layout.at] + layout.y_mutual * V[layout.other]


def synthesize_measurements(sol, case: NetworkCase, placement: PmuPlacement, noise: NoiseModel,
                            rng: np.random.Generator, outage: Optional[int] = None,
                            current_noise: Optional[NoiseModel] = None,
                            layout: Optional[MeasurementLayout] = None) -> MeasurementSet:
    """Noisy voltage phasors at PMU buses and currents on every incident branch end.

    ``current_noise`` defaults to the voltage noise model.
    """
    if layout is None:
        layout = measurement_layout(case, placement, outage)
    v_true, i_true = true_phasors(sol.vm, sol.va, layout)
    v = corrupt(v_true, noise, rng)
    i = corrupt(i_true, current_noise or noise, rng)
    return MeasurementSet(layout, v, i, v_true, i_true)


def estimate_voltages(v: np.ndarray, i: np.ndarray, layout: MeasurementLayout) -> np.ndarray:
    """Complex voltage per bus from PMU voltages and line-model pseudo-voltages.

    Works on a trailing measurement axis, so ``v``/``i`` may carry leading
    batch dimensions. Non-PMU buses average every estimate coming from a PMU
    neighbour, in rectangular form.
    """
    n = layout.n_bus
    is_pmu = np.zeros(n, dtype=bool)
    is_pmu[layout.pmu] = True
    use = ~is_pmu[layout.other]
    target = layout.other[use]
    counts = np.bincount(target, minlength=n)
    missing = np.flatnonzero(~is_pmu & (counts == 0))
    if missing.size:
        raise PlacementError(f"buses at indices {missing.tolist()} are not covered by any PMU")
    v_at = v[..., np.searchsorted(layout.pmu, layout.at[use])]
    pseudo = (i[..., use] - layout.y_self[use] * v_at) / layout.y_mutual[use]
    avg = np.zeros((target.size, n))
    avg[np.arange(target.size), target] = 1.0 / counts[target]
    out = pseudo @ avg
    out[..., layout.pmu] = v
    return out


def build_feature_matrix(ms: MeasurementSet, case: Optional[NetworkCase] = None,
                         placement: Optional[PmuPlacement] = None) -> np.ndarray:
    """n x 2 node features: column 0 magnitude (pu), column 1 angle (radians)."""
    V = estimate_voltages(ms.v, ms.i, ms.layout)
    return np.stack([np.abs(V), np.angle(V)], axis=-1)


# ------------------------------------------------------------------------ LSE

@dataclass
class LseProblem:
    H: np.ndarray
    layout: MeasurementLayout
    z: Optional[np.ndarray] = None

    @cached_property
    def solver(self) -> "LseSolver":
        return LseSolver(self.H)


def build_H(case: NetworkCase, placement: PmuPlacement, outage: Optional[int] = None,
            check_rank: bool = True) -> LseProblem:
    """Measurement matrix over the rectangular state ``(e_1, f_1, ..., e_n, f_n)``."""
    layout = measurement_layout(case, placement, outage)
    n = case.n_bus
    p, c = layout.pmu.size, layout.branch.size
    H = np.zeros((2 * (p + c), 2 * n))
    r = 2 * np.arange(p)
    H[r, 2 * layout.pmu] = 1.0
    H[r + 1, 2 * layout.pmu + 1] = 1.0
    for j in range(c):
        row = 2 * (p + j)
        for bus, y in ((layout.at[j], layout.y_self[j]), (layout.other[j], layout.y_mutual[j])):
            H[row:row + 2, 2 * bus:2 * bus + 2] += [[y.real, -y.imag], [y.imag, y.real]]
    problem = LseProblem(H, layout)
    if check_rank:
        problem.solver  # noqa: B018 - factorises and raises on rank loss
    return problem


class LseSolver:
    """Least squares via a thin QR factorisation, reused across many ``z``."""

    def __init__(self, H: np.ndarray, rtol: float = 1e-10):
        m, s = H.shape
        if m < s:
            raise ObservabilityError(f"{m} measurements cannot observe {s} states")
        self.Q, self.R = np.linalg.qr(H, mode="reduced")
        d = np.abs(np.diag(self.R))
        if d.min() <= rtol * d.max():
            deficient = int(np.sum(d <= rtol * d.max()))
            raise ObservabilityError(f"measurement matrix is rank deficient by {deficient}")

    def solve(self, z: np.ndarray) -> np.ndarray:
        """Rectangular state estimate; ``z`` is (m,) or (N, m)."""
        z = np.asarray(z, dtype=float)
        rhs = self.Q.T @ z.T
        return solve_triangular(self.R, rhs).T


def solve_lse(problem: LseProblem, z: Optional[np.ndarray] = None):
    """Return ``(vm, va)`` in pu and radians; batched when ``z`` is 2-D."""
    z = problem.z if z is None else z
    if z is None:
        raise ValueError("no measurement vector supplied")
    x = problem.solver.solve(z)
    V = x[..., 0::2] + 1j * x[..., 1::2]
    return np.abs(V), np.angle(V)
