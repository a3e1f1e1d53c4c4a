"""Network case data, adjacency / admittance assembly and connectivity.

Angles are kept in radians inside :class:`Bus` and :class:`Branch`; the JSON
and MATPOWER readers convert from degrees at the boundary.
"""
from __future__ import annotations

import json
import re
from collections import deque
from dataclasses import dataclass, replace
from functools import cached_property
from importlib import resources
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

KINDS = ("slack", "pv", "pq")


class CaseError(ValueError):
    """Raised for malformed or inconsistent case data."""


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    p_load: float = 0.0
    q_load: float = 0.0
    gs: float = 0.0
    bs: float = 0.0
    base_kv: float = 1.0
    vm_init: float = 1.0
    va_init: float = 0.0
    v_setpoint: float = 1.0
    p_gen: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    tap: float = 1.0
    shift: float = 0.0
    in_service: bool = True

    def admittance_blocks(self) -> tuple[complex, complex, complex, complex]:
        """Return the pi-model blocks ``(yff, yft, ytf, ytt)`` in pu.

        The off-nominal tap sits on the from side, as in MATPOWER.
        """
        if self.r == 0 and self.x == 0:
            raise CaseError(f"branch {self.from_bus}-{self.to_bus} has r = x = 0")
        ys = 1.0 / complex(self.r, self.x)
        bc = 0.5j * self.b_charging
        t = self.tap * np.exp(1j * self.shift)
        yff = (ys + bc) / (t * np.conj(t))
        yft = -ys / np.conj(t)
        ytf = -ys / t
        ytt = ys + bc
        return complex(yff), complex(yft), complex(ytf), complex(ytt)


@dataclass(frozen=True)
class NetworkCase:
    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        _validate(self)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @cached_property
    def index(self) -> dict[int, int]:
        """Map bus id -> row index."""
        return {b.id: i for i, b in enumerate(self.buses)}

    @cached_property
    def bus_ids(self) -> np.ndarray:
        return np.array([b.id for b in self.buses])

    @cached_property
    def slack_index(self) -> int:
        return next(i for i, b in enumerate(self.buses) if b.kind == "slack")

    def branch_ends(self) -> tuple[np.ndarray, np.ndarray]:
        """Row indices of the from and to buses of every branch."""
        f = np.array([self.index[br.from_bus] for br in self.branches], dtype=int)
        t = np.array([self.index[br.to_bus] for br in self.branches], dtype=int)
        return f, t

    def in_service_mask(self, outage: Optional[int] = None) -> np.ndarray:
        mask = np.array([br.in_service for br in self.branches], dtype=bool)
        if outage is not None:
            _check_outage(self, outage)
            mask[outage] = False
        return mask

    def find_branch(self, from_bus: int, to_bus: int) -> int:
        """Index of the first in-service branch joining the two buses (either direction)."""
        pair = {from_bus, to_bus}
        for k, br in enumerate(self.branches):
            if br.in_service and {br.from_bus, br.to_bus} == pair:
                return k
        raise CaseError(f"no in-service branch between buses {from_bus} and {to_bus}")

    def content_hash(self) -> str:
        import hashlib

        return hashlib.sha256(dump_case(self).encode()).hexdigest()[:16]


def _validate(case: NetworkCase) -> None:
    ids = [b.id for b in case.buses]
    if len(set(ids)) != len(ids):
        seen = set()
        dup = next(i for i in ids if i in seen or seen.add(i))
        raise CaseError(f"duplicate bus id {dup}")
    n_slack = sum(b.kind == "slack" for b in case.buses)
    if n_slack != 1:
        raise CaseError(f"expected exactly one slack bus, found {n_slack}")
    for b in case.buses:
        if b.kind not in KINDS:
            raise CaseError(f"bus {b.id}: unknown kind {b.kind!r}")
        if not b.base_kv > 0:
            raise CaseError(f"bus {b.id}: base_kv must be positive")
    idset = set(ids)
    for k, br in enumerate(case.branches):
        for end in (br.from_bus, br.to_bus):
            if end not in idset:
                raise CaseError(f"branch {k} ({br.from_bus}-{br.to_bus}): dangling endpoint {end}")
        if br.from_bus == br.to_bus:
            raise CaseError(f"branch {k}: from_bus equals to_bus ({br.from_bus})")
        if br.r == 0 and br.x == 0:
            raise CaseError(f"branch {k} ({br.from_bus}-{br.to_bus}) has r = x = 0")


def _check_outage(case: NetworkCase, outage: int) -> None:
    if not 0 <= outage < case.n_branch:
        raise IndexError(f"branch index {outage} out of range [0, {case.n_branch})")
    if not case.branches[outage].in_service:
        raise CaseError(f"branch {outage} is already out of service")


# --------------------------------------------------------------------- parsing

def parse_case(text: str, name: str = "") -> NetworkCase:
    """Parse a native JSON case document or MATPOWER-style ``mpc.*`` text."""
    if text.lstrip().startswith("{"):
        return _parse_json(text, name)
    return _parse_matpower(text, name)


def load_case(path) -> NetworkCase:
    from pathlib import Path

    p = Path(path)
    return parse_case(p.read_text(), name=p.stem)


def bundled_case(name: str = "case118") -> NetworkCase:
    text = resources.files("gnnse.data").joinpath(f"{name}.json").read_text()
    return parse_case(text, name=name)


def _parse_json(text: str, name: str) -> NetworkCase:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseError(f"line {exc.lineno}: {exc.msg}") from exc
    try:
        buses = [
            Bus(
                id=int(b["id"]),
                kind=str(b["kind"]).lower(),
                p_load=float(b.get("p_load", 0.0)),
                q_load=float(b.get("q_load", 0.0)),
                gs=float(b.get("gs", 0.0)),
                bs=float(b.get("bs", 0.0)),
                base_kv=float(b.get("base_kv", 1.0)),
                vm_init=float(b.get("vm", 1.0)),
                va_init=np.deg2rad(float(b.get("va", 0.0))),
                v_setpoint=float(b.get("v_set", b.get("vm", 1.0))),
                p_gen=float(b.get("p_gen", 0.0)),
            )
            for b in doc["buses"]
        ]
        branches = [
            Branch(
                from_bus=int(br["from"]),
                to_bus=int(br["to"]),
                r=float(br["r"]),
                x=float(br["x"]),
                b_charging=float(br.get("b", 0.0)),
                tap=float(br.get("tap", 1.0)) or 1.0,
                shift=np.deg2rad(float(br.get("shift", 0.0))),
                in_service=bool(br.get("status", 1)),
            )
            for br in doc["branches"]
        ]
        base_mva = float(doc.get("base_mva", 100.0))
    except (KeyError, TypeError, ValueError) as exc:
        raise CaseError(f"malformed case document: {exc!r}") from exc
    return NetworkCase(base_mva, buses, branches, name=name)


_MPC_BLOCK = re.compile(r"mpc\.(\w+)\s*=\s*\[")
_MPC_SCALAR = re.compile(r"mpc\.(\w+)\s*=\s*([^;\[]+);")
_MP_KIND = {1: "pq", 2: "pv", 3: "slack"}


def _parse_matpower(text: str, name: str) -> NetworkCase:
    lines = text.splitlines()
    scalars: dict[str, str] = {}
    tables: dict[str, list[tuple[int, list[float]]]] = {}
    current: Optional[str] = None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("%", 1)[0].strip()
        if not line:
            continue
        if current is None:
            m = _MPC_BLOCK.search(line)
            if m:
                current = m.group(1)
                tables[current] = []
                line = line[m.end():]
            else:
                m = _MPC_SCALAR.search(line)
                if m:
                    scalars[m.group(1)] = m.group(2).strip()
                continue
        closing = "]" in line
        body = line.split("]", 1)[0]
        for row in body.split(";"):
            row = row.strip()
            if not row:
                continue
            try:
                tables[current].append((lineno, [float(v) for v in row.replace(",", " ").split()]))
            except ValueError:
                raise CaseError(f"line {lineno}: malformed row {row!r}") from None
        if closing:
            current = None
    if current is not None:
        raise CaseError(f"unterminated matrix mpc.{current}")
    for key in ("bus", "branch"):
        if key not in tables:
            raise CaseError(f"missing mpc.{key}")

    gens: dict[int, tuple[float, float]] = {}
    for lineno, row in tables.get("gen", []):
        if len(row) < 8:
            raise CaseError(f"line {lineno}: gen row needs at least 8 columns")
        if row[7] <= 0:
            continue
        p, _ = gens.get(int(row[0]), (0.0, 0.0))
        gens[int(row[0])] = (p + row[1], row[5])

    buses = []
    for lineno, row in tables["bus"]:
        if len(row) < 10:
            raise CaseError(f"line {lineno}: bus row needs at least 10 columns")
        bid, btype = int(row[0]), int(row[1])
        if btype not in _MP_KIND:
            raise CaseError(f"line {lineno}: unsupported bus type {btype}")
        p_gen, v_set = gens.get(bid, (0.0, row[7]))
        buses.append(Bus(bid, _MP_KIND[btype], row[2], row[3], row[4], row[5], row[9],
                         row[7], np.deg2rad(row[8]), v_set, p_gen))
    branches = []
    for lineno, row in tables["branch"]:
        if len(row) < 11:
            raise CaseError(f"line {lineno}: branch row needs at least 11 columns")
        branches.append(Branch(int(row[0]), int(row[1]), row[2], row[3], row[4],
                               row[8] or 1.0, np.deg2rad(row[9]), bool(row[10])))
    base_mva = float(scalars.get("baseMVA", "100"))
    return NetworkCase(base_mva, buses, branches, name=name)


def case_to_dict(case: NetworkCase) -> dict:
    return {
        "base_mva": case.base_mva,
        "buses": [
            {"id": b.id, "kind": b.kind, "p_load": b.p_load, "q_load": b.q_load,
             "gs": b.gs, "bs": b.bs, "base_kv": b.base_kv, "vm": b.vm_init,
             "va": float(np.rad2deg(b.va_init)), "v_set": b.v_setpoint, "p_gen": b.p_gen}
            for b in case.buses
        ],
        "branches": [
            {"from": br.from_bus, "to": br.to_bus, "r": br.r, "x": br.x, "b": br.b_charging,
             "tap": br.tap, "shift": float(np.rad2deg(br.shift)), "status": int(br.in_service)}
            for br in case.branches
        ],
    }


def dump_case(case: NetworkCase) -> str:
    return json.dumps(case_to_dict(case), sort_keys=True)


# ------------------------------------------------------------------ matrices

def build_adjacency(case: NetworkCase, outage: Optional[int] = None) -> np.ndarray:
    """Binary symmetric adjacency over in-service branches, zero diagonal.

    Parallel branches collapse to a single edge, so taking one of them out
    leaves the entry at 1.
    """
    mask = case.in_service_mask(outage)
    f, t = case.branch_ends()
    adj = np.zeros((case.n_bus, case.n_bus), dtype=np.int8)
    adj[f[mask], t[mask]] = 1
    adj[t[mask], f[mask]] = 1
    np.fill_diagonal(adj, 0)
    return adj


def branch_admittances(case: NetworkCase) -> np.ndarray:
    """(m, 4) complex array of ``(yff, yft, ytf, ytt)`` per branch."""
    return np.array([br.admittance_blocks() for br in case.branches], dtype=complex).reshape(-1, 4)


def build_ybus(case: NetworkCase, outage: Optional[int] = None) -> sp.csr_matrix:
    """Bus admittance matrix in pu (sparse CSR)."""
    n = case.n_bus
    mask = case.in_service_mask(outage)
    f, t = case.branch_ends()
    yb = branch_admittances(case)[mask]
    f, t = f[mask], t[mask]
    ysh = np.array([complex(b.gs, b.bs) for b in case.buses]) / case.base_mva
    rows = np.concatenate([f, f, t, t, np.arange(n)])
    cols = np.concatenate([f, t, f, t, np.arange(n)])
    vals = np.concatenate([yb[:, 0], yb[:, 1], yb[:, 2], yb[:, 3], ysh])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def branch_matrices(case: NetworkCase, outage: Optional[int] = None):
    """Sparse ``Yf``, ``Yt`` such that ``Yf @ V`` is the from-end branch current.

    Out-of-service rows are zero.
    """
    n, m = case.n_bus, case.n_branch
    mask = case.in_service_mask(outage).astype(float)
    f, t = case.branch_ends()
    yb = branch_admittances(case) * mask[:, None]
    k = np.arange(m)
    yf = sp.csr_matrix((np.r_[yb[:, 0], yb[:, 1]], (np.r_[k, k], np.r_[f, t])), shape=(m, n))
    yt = sp.csr_matrix((np.r_[yb[:, 2], yb[:, 3]], (np.r_[k, k], np.r_[f, t])), shape=(m, n))
    return yf, yt


# --------------------------------------------------------------- topology

def is_connected(adj) -> bool:
    """Breadth-first search from node 0 reaches every node."""
    adj = np.asarray(adj)
    n = adj.shape[0]
    if n == 0:
        return True
    seen = np.zeros(n, dtype=bool)
    seen[0] = True
    queue = deque([0])
    while queue:
        v = queue.popleft()
        for u in np.flatnonzero(adj[v]):
            if not seen[u]:
                seen[u] = True
                queue.append(u)
    return bool(seen.all())


def remove_branch(case: NetworkCase, index: int) -> NetworkCase:
    """Copy of ``case`` with branch ``index`` out of service."""
    _check_outage(case, index)
    branches = list(case.branches)
    branches[index] = replace(branches[index], in_service=False)
    return replace(case, branches=tuple(branches))


def neighbors(adj: np.ndarray) -> list[np.ndarray]:
    return [np.flatnonzero(row) for row in np.asarray(adj)]


def parse_line_spec(case: NetworkCase, spec: str) -> int:
    """Resolve ``"8-5"`` (bus ids) or ``"#17"`` (branch index) to a branch index."""
    spec = spec.strip()
    if spec.startswith("#"):
        k = int(spec[1:])
        _check_outage(case, k)
        return k
    try:
        a, b = (int(s) for s in spec.split("-"))
    except ValueError:
        raise CaseError(f"bad line spec {spec!r}; expected FROM-TO or #INDEX") from None
    return case.find_branch(a, b)


def line_label(case: NetworkCase, k: int) -> str:
    br = case.branches[k]
    return f"{br.from_bus}-{br.to_bus}"


def parse_line_list(case: NetworkCase, specs: Sequence[str]) -> list[int]:
    return [parse_line_spec(case, s) for s in specs]
