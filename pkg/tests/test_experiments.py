import json
from collections import deque

import numpy as np
import pytest

from gnnse.experiments import (STUDY_LIT_LINES, STUDY_MIT_LINES, ErrorDensity, StudyConfig,
                               compute_metrics, default_placement, error_density, label_stats,
                               labels_in_degrees, rank_outages, read_csv, run_noise_study,
                               run_topology_study, sample_errors, select_outages, table_rows,
                               write_metrics, write_ranking, write_sidecar)
from gnnse.grid_model import Branch, Bus, NetworkCase, line_label, parse_line_list
from gnnse.measurement import auto_placement
from gnnse.nn import Normalizer
from gnnse.nn.models import STD_FLOOR


def _labels(rng, n_samples=10, n=6):
    vm = rng.uniform(0.95, 1.05, (n_samples, n))
    va = rng.uniform(-30, 30, (n_samples, n))
    return np.stack([vm, va], axis=-1)


# ------------------------------------------------------------------- metrics

def test_metrics_perfect():
    lab = _labels(np.random.default_rng(0))
    r = compute_metrics(lab, lab)
    assert (r.mae_angle, r.mape_magnitude, r.total_mae_normalized) == (0.0, 0.0, 0.0)
    assert r.r2_angle == 1.0 and r.r2_magnitude == 1.0


def test_metrics_mean_predictor_r2_zero():
    lab = _labels(np.random.default_rng(1))
    pred = np.empty_like(lab)
    pred[..., 0] = lab[..., 0].mean()
    pred[..., 1] = lab[..., 1].mean()
    r = compute_metrics(pred, lab)
    assert r.r2_angle == pytest.approx(0.0, abs=1e-12)
    assert r.r2_magnitude == pytest.approx(0.0, abs=1e-12)


def test_metrics_loop_oracle():
    rng = np.random.default_rng(2)
    lab = _labels(rng)
    pred = lab + rng.normal(0, [0.01, 0.5], lab.shape)
    stats = Normalizer(rng.normal(size=(6, 2)), rng.uniform(0.5, 2.0, (6, 2)))
    r = compute_metrics(pred, lab, stats)
    N, n = lab.shape[:2]
    mae = mape = 0.0
    for s in range(N):
        for i in range(n):
            mae += abs(lab[s, i, 1] - pred[s, i, 1])
            mape += abs((lab[s, i, 0] - pred[s, i, 0]) / lab[s, i, 0])
    total = 0.0
    for s in range(N):
        for i in range(n):
            for c in range(2):
                total += abs((pred[s, i, c] - stats.mean[i, c]) / stats.std[i, c]
                             - (lab[s, i, c] - stats.mean[i, c]) / stats.std[i, c])

    def r2(c):
        ys = [lab[s, i, c] for s in range(N) for i in range(n)]
        ps = [pred[s, i, c] for s in range(N) for i in range(n)]
        ybar = sum(ys) / len(ys)
        return 1 - sum((y - p) ** 2 for y, p in zip(ys, ps)) / sum((y - ybar) ** 2 for y in ys)

    assert r.mae_angle == pytest.approx(mae / (N * n), abs=1e-12)
    assert r.mape_magnitude == pytest.approx(100 * mape / (N * n), abs=1e-12)
    assert r.total_mae_normalized == pytest.approx(total / (N * n * 2), abs=1e-12)
    assert r.r2_angle == pytest.approx(r2(1), abs=1e-12)
    assert r.r2_magnitude == pytest.approx(r2(0), abs=1e-12)
    assert r.n_samples == N


def test_metrics_zero_magnitude_excluded():
    lab = _labels(np.random.default_rng(3), n_samples=4, n=3)
    lab[0, 1, 0] = 0.0
    pred = lab * 1.01
    r = compute_metrics(pred, lab)
    assert r.n_excluded == 1
    assert r.mape_magnitude == pytest.approx(1.0)
    assert np.isfinite(r.mape_magnitude)


def test_metrics_constant_outputs_left_out_of_total():
    rng = np.random.default_rng(4)
    lab = _labels(rng)
    lab[:, 2, 0] = 1.02  # e.g. a voltage-controlled bus
    stats = Normalizer.fit(lab)
    pred = lab.copy()
    pred[:, 2, 0] += 1e-3  # would be a z-error of 1000 if included
    r = compute_metrics(pred, lab, stats)
    assert r.n_constant == 1
    assert r.total_mae_normalized == 0.0


def test_metrics_shape_mismatch():
    with pytest.raises(ValueError):
        compute_metrics(np.zeros((2, 3, 2)), np.zeros((2, 4, 2)))


def test_label_stats_match_degree_fit():
    rng = np.random.default_rng(5)
    lab = _labels(rng)
    lab[..., 1] = np.deg2rad(lab[..., 1])
    lab[:, 0, 1] = 0.5  # constant angle
    st = label_stats(lab)
    direct = Normalizer.fit(labels_in_degrees(lab))
    np.testing.assert_allclose(st.mean, direct.mean, rtol=1e-13, atol=1e-13)
    varying = direct.std > STD_FLOOR
    np.testing.assert_allclose(st.std[varying], direct.std[varying], rtol=1e-13)
    assert st.std[0, 1] == STD_FLOOR


# ------------------------------------------------------------------- density

def test_density_all_zero():
    d = error_density(np.zeros(17), -1.0, 1.0, 10)
    assert d.counts.sum() == 17
    nz = np.flatnonzero(d.counts)
    assert nz.size == 1 and d.edges[nz[0]] <= 0.0 < d.edges[nz[0] + 1]


def test_density_symmetric():
    d = error_density(np.r_[np.ones(5), -np.ones(5)], -2.0, 2.0, 5)
    np.testing.assert_array_equal(d.counts, d.counts[::-1])


def test_density_tally_oracle():
    rng = np.random.default_rng(6)
    errs = rng.normal(0, 1.0, 500)
    lo, hi, bins = -1.5, 1.5, 12
    d = error_density(errs, lo, hi, bins)
    w = (hi - lo) / bins
    tally = [0] * bins
    for e in errs:
        k = int(np.floor((e - lo) / w))
        tally[min(max(k, 0), bins - 1)] += 1
    assert d.counts.tolist() == tally
    assert d.counts.sum() == errs.size
    assert d.counts[0] == np.sum(errs < lo + w) and d.counts[-1] == np.sum(errs >= hi - w)


def test_density_rejects_bad_input():
    with pytest.raises(ValueError):
        error_density([], -1, 1, 4)
    with pytest.raises(ValueError):
        error_density([0.0], 1, -1, 4)


def test_sample_errors_per_sample_mean():
    pred = np.zeros((3, 4, 2))
    lab = np.zeros((3, 4, 2))
    pred[1, :, 1] = [1, 2, 3, 6]
    e_mag, e_ang = sample_errors(pred, lab)
    assert e_mag.shape == (3,) and e_ang.tolist() == [0.0, 3.0, 0.0]


# --------------------------------------------------------------- ranking

def _lossless_spur_case():
    """Slack 1 feeds load bus 2; buses 2, 3, 4 form an unloaded triangle."""
    buses = [Bus(1, "slack", v_setpoint=1.0), Bus(2, "pq", p_load=50.0, q_load=10.0),
             Bus(3, "pq"), Bus(4, "pq")]
    branches = [Branch(1, 2, 0.01, 0.1), Branch(2, 3, 0.0, 0.1), Branch(3, 4, 0.0, 0.1),
                Branch(4, 2, 0.0, 0.1)]
    return NetworkCase(100.0, buses, branches, name="spur")


def test_rank_zero_flow_branch_has_zero_impact():
    case = _lossless_spur_case()
    impacts = rank_outages(case)
    by_branch = {o.branch: o for o in impacts}
    assert not by_branch[0].connected and not by_branch[0].ranked
    for k in (1, 2, 3):
        assert by_branch[k].ranked
        assert by_branch[k].impact_score == pytest.approx(0.0, abs=1e-8)
    # exact ties fall back to branch index
    assert [o.branch for o in impacts if o.ranked] == sorted(k for k in (1, 2, 3))


def _bridges_bfs(case):
    n = case.n_bus
    idx = case.index
    out = set()
    for k in range(case.n_branch):
        adj = [[] for _ in range(n)]
        for j, br in enumerate(case.branches):
            if j != k and br.in_service:
                a, b = idx[br.from_bus], idx[br.to_bus]
                adj[a].append(b)
                adj[b].append(a)
        seen = {0}
        q = deque([0])
        while q:
            u = q.popleft()
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    q.append(v)
        if len(seen) < n:
            out.add(k)
    return out


@pytest.fixture(scope="module")
def ranking118():
    from gnnse.grid_model import bundled_case
    case = bundled_case()
    return case, rank_outages(case)


def test_rank_118_disconnecting_outages(ranking118):
    case, impacts = ranking118
    flagged = {o.branch for o in impacts if not o.connected}
    assert flagged == _bridges_bfs(case)
    assert case.find_branch(12, 117) in flagged


def test_rank_118_order_and_study_lines(ranking118):
    case, impacts = ranking118
    ok = [o for o in impacts if o.ranked]
    scores = [o.impact_score for o in ok]
    assert scores == sorted(scores, reverse=True)
    assert all(s >= 0 for s in scores)
    assert all(not o.ranked for o in impacts[len(ok):])
    top10 = {o.label for o in ok[:10]}
    assert len(top10 & set(STUDY_MIT_LINES)) >= 3


def test_rank_independent_of_branch_order(ranking118):
    case, impacts = ranking118
    rev = NetworkCase(case.base_mva, case.buses, case.branches[::-1], case.name)
    impacts_rev = rank_outages(rev)
    score = {(o.from_bus, o.to_bus, o.branch): o.impact_score for o in impacts}
    m = case.n_branch - 1
    for o in impacts_rev:
        assert o.impact_score == pytest.approx(score[o.from_bus, o.to_bus, m - o.branch], rel=1e-9, abs=1e-9)
    assert rank_outages(case) == impacts


def test_select_outages(ranking118):
    case, impacts = ranking118
    mit, lit = select_outages(impacts, 3)
    ok = [o.branch for o in impacts if o.ranked]
    assert mit == ok[:3] and lit == ok[::-1][:3]


def test_write_ranking(tmp_path, ranking118):
    case, impacts = ranking118
    rows = read_csv(write_ranking(tmp_path / "r.csv", impacts))
    assert rows[0]["rank"] == "1" and rows[0]["status"] == "ok"
    assert {r["status"] for r in rows} >= {"ok", "disconnected"}
    assert len(rows) == len(impacts)


# ------------------------------------------------------------------- studies

@pytest.fixture(scope="module")
def tiny_studies():
    from gnnse.grid_model import bundled_case
    case = bundled_case()
    placement = default_placement(case)
    cfg = StudyConfig(n_train=24, n_test=6, epochs=2, hidden_gnn=8, hidden_mlp=16)
    noise = run_noise_study(case, placement, cfg)
    models = {a: noise.models[a, "gmm"] for a in ("gnn", "mlp")}
    topo = run_topology_study(case, placement, models, noise.train_sets["gmm"].labels, cfg)
    return case, placement, cfg, noise, topo


def test_default_placement_covers_study_lines(tiny_studies):
    case, placement, *_ = tiny_studies
    assert len(placement) == 38


def test_noise_study_structure(tiny_studies):
    _, _, cfg, noise, _ = tiny_studies
    assert {(r.estimator, r.noise) for r in noise.reports} == {
        (e, n) for e in ("lse", "gnn", "mlp") for n in ("gaussian", "gmm")}
    for r in noise.reports:
        assert r.n_samples == cfg.n_test and r.r2_angle <= 1 and r.r2_magnitude <= 1
        assert all(np.isfinite([r.mae_angle, r.mape_magnitude, r.total_mae_normalized]))


def test_topology_study_structure(tiny_studies):
    case, _, cfg, _, topo = tiny_studies
    labels = [line_label(case, k) for k in parse_line_list(case, STUDY_MIT_LINES + STUDY_LIT_LINES)]
    assert set(topo.groups) == set(labels)
    assert topo.groups[labels[0]] == ("MIT", 1)
    assert len(topo.reports) == 3 * 10 and not topo.skipped
    assert len(topo.densities) == 2 * 2 * 10
    assert all(d.counts.sum() == cfg.n_test for d in topo.densities)
    assert topo.total_mae("gnn", labels[0]) > 0


def test_topology_study_skips_uncovered(tiny_studies):
    case, _, cfg, noise, _ = tiny_studies
    thin = auto_placement(case)  # base topology only; bus 30 loses cover without 30-17
    models = {"mlp": noise.models["mlp", "gmm"]}
    k = case.find_branch(30, 17)
    res = run_topology_study(case, thin, models, noise.train_sets["gmm"].labels, cfg, lines=([k], []))
    assert res.reports == [] and res.skipped[0][1] == "all"


def test_table_rows(tiny_studies):
    _, _, _, noise, topo = tiny_studies
    rows = [r.row() for r in noise.reports + topo.reports]
    t = table_rows(rows, topo.groups)
    assert [r["estimator"] for r in t["table1"]] == ["LSE", "GNN", "LSE", "GNN"]
    assert [r["estimator"] for r in t["table2"]] == ["DNN", "GNN"]
    assert [r["group"] for r in t["table3"]] == ["LIT"] * 5 + ["MIT"] * 5
    assert t["table3"][5]["removed_line"] == "8-5" and t["table3"][5]["topology"] == "MIT_1"


def test_metrics_csv_and_sidecar(tmp_path, tiny_studies):
    _, _, cfg, noise, _ = tiny_studies
    path = write_metrics(tmp_path / "metrics.csv", noise.reports)
    side = write_sidecar(path, {"train": cfg.train_seed}, cfg.hash())
    rows = read_csv(path)
    assert float(rows[0]["mae_angle"]) == noise.reports[0].mae_angle
    doc = json.loads(side.read_text())
    assert doc["config_hash"] == cfg.hash() and doc["seeds"] == {"train": 1} and "commit" in doc


def test_study_config_hash_stable():
    assert StudyConfig().hash() == StudyConfig().hash()
    assert StudyConfig(epochs=3).hash() != StudyConfig().hash()


def test_error_density_labels():
    d = error_density([0.1], -1, 1, 4, quantity="angle", estimator="gnn", topology="8-5")
    assert isinstance(d, ErrorDensity) and (d.quantity, d.estimator, d.topology) == ("angle", "gnn", "8-5")
    assert [r["count"] for r in d.rows()] == [0, 0, 1, 0]
