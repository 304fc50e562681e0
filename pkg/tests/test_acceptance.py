"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line (run with `pytest tests/test_acceptance.py -v -s`).

The heavy suite optimizations are shared through module-scoped fixtures;
the whole module targets well under ten minutes on an 8-core machine.
"""

import dataclasses
import json
import math
import time

import numpy as np
import pytest
from scipy import stats
from scipy.optimize import linear_sum_assignment

from bevmotion.cli import main as cli_main
from bevmotion.clustering import bfs_cluster
from bevmotion.core import BACKWARD, FORWARD, Config, GridSpec, MotionStack
from bevmotion.evaluate import bucketed_errors, divergence_report
from bevmotion.gradcheck import run_gradient_checks
from bevmotion.losses import (loss_backward, loss_cluster, loss_forward,
                              loss_sup, total_loss)
from bevmotion.optimizer import ablation_rows, optimize_scene, run_suite
from bevmotion.preprocess import CellSet
from bevmotion.synth import generate, recipe_suite
from bevmotion.transport import cost_matrix, pseudo_labels, sinkhorn

from conftest import make_stack

CFG = Config()


def report(n, text):
    print(f"PASS criterion {n}: {text}")


@pytest.fixture(scope="module")
def ablation_results():
    recipes = recipe_suite("ablation")
    rows = ablation_rows()
    out = {}
    for key in (1, 6, 8):
        out[key] = run_suite(recipes, CFG, rows[key], threads=0).aggregate
    return out


@pytest.fixture(scope="module")
def divergence_states():
    recipes = recipe_suite("divergence")
    res = run_suite(recipes, CFG, ablation_rows()[1], threads=0,
                    keep_fields=True)
    return recipes, res


def test_criterion_01_gradient_fidelity():
    start = time.time()
    results = run_gradient_checks(CFG, n_points=100, fd_step=1e-5, tol=1e-5)
    elapsed = time.time() - start
    assert {r.term for r in results} == {"sup", "c", "f", "b", "knn"}
    for r in results:
        assert r.passed, f"{r.term}: rel error {r.max_rel_error:.2e}"
    assert elapsed < 30.0
    worst = max(r.max_rel_error for r in results)
    report(1, f"all five gradients match finite differences "
              f"(worst rel error {worst:.2e}, {elapsed:.1f}s)")


def test_criterion_02_sinkhorn_correctness():
    # uniform marginals on converged plans
    rng = np.random.default_rng(0)
    from bevmotion.transport import CostMatrix

    plan = sinkhorn(CostMatrix(rng.uniform(0, 1, (40, 53)), CFG.theta_c),
                    0.05, 5000, 1e-6)
    assert plan.converged
    n, m = plan.values.shape
    assert np.abs(plan.values.sum(axis=1) - 1 / n).max() < 1e-6
    assert np.abs(plan.values.sum(axis=0) - 1 / m).max() < 1e-6

    # 2x2 separated instance against brute-force exact OT
    coords = np.array([[0.0, 0.0], [10.0, 0.0]])
    cells = CellSet(coords=coords, indices=np.array([[0, 0], [1, 1]]))
    cost = cost_matrix(cells, cells, CFG.theta_c)
    r, c = linear_sum_assignment(cost.values)
    exact = np.zeros((2, 2))
    exact[r, c] = 0.5
    for eps in (0.03, 0.01, 0.003):
        plan = sinkhorn(cost, eps, 1000, 1e-6)
        assert plan.converged
        assert np.abs(plan.values.sum(axis=1) - 0.5).max() < 1e-6
        assert np.abs(plan.values.sum(axis=0) - 0.5).max() < 1e-6
        assert np.abs(plan.values - exact).max() < 1e-4
    report(2, "marginals within 1e-6 and 2x2 plans match exact OT for "
              "eps in {0.03, 0.01, 0.003}")


def test_criterion_03_rigid_shift_labels():
    coords = np.array([[0.0, 0.0], [6.0, 0.0], [12.0, 0.0], [0.0, 6.0],
                       [6.0, 6.0], [12.0, 6.0], [0.0, 12.0], [12.0, 12.0]])
    idx = np.column_stack([np.arange(8), np.arange(8)])
    src = CellSet(coords=coords, indices=idx)
    tgt = CellSet(coords=coords + [0.5, 0.0], indices=idx)
    plan = sinkhorn(cost_matrix(src, tgt, CFG.theta_c), CFG.sinkhorn_epsilon,
                    CFG.sinkhorn_iters, CFG.sinkhorn_tol)
    labels = pseudo_labels(plan, src, tgt)
    worst = np.abs(labels - [0.5, 0.0]).max()
    assert worst < 1e-2
    report(3, f"rigid (0.5, 0) shift recovered for every cell "
              f"(worst deviation {worst:.2e} m)")


def test_criterion_04_loss_zero_cases(small_grid=None):
    grid = GridSpec(x_range=(-2.0, 2.0), y_range=(-2.0, 2.0),
                    z_range=(0.0, 0.4), voxel_xy=0.25, voxel_z=0.4)
    idx = np.array([[4, 4], [4, 5], [10, 10]])
    base = np.array([0.3, -0.2])
    vals = np.stack([base * (t + 1) for t in range(CFG.T_prime)])[:, None, :]
    vals = np.repeat(vals, 3, axis=1)
    fwd = make_stack(grid, idx, vals, FORWARD)
    bwd = make_stack(grid, idx, -vals, BACKWARD)
    labels_f = make_stack(grid, idx, vals, FORWARD)
    labels_b = make_stack(grid, idx, -vals, BACKWARD)
    cells = CellSet(coords=grid.cell_centers(idx), indices=idx)
    clusters = bfs_cluster(cells, CFG.d_c)

    v_f, _ = loss_forward(fwd)                       # constant velocity
    v_b, _, _ = loss_backward(fwd, bwd, CFG.theta_b)  # exact opposition
    v_c, _ = loss_cluster(fwd, clusters)             # cluster-uniform motion
    v_s, _ = loss_sup(fwd, labels_f)                 # prediction at labels
    total = total_loss(fwd, bwd, labels_f, labels_b, clusters, CFG).total
    for name, v in (("f", v_f), ("b", v_b), ("c", v_c), ("sup", v_s),
                    ("total", total)):
        assert abs(v) <= 1e-12, f"{name} = {v}"
    report(4, "L_f, L_b, L_c, L_sup and the total are exactly zero at "
              "their documented optima")


def _union_find_partition(indices, d_c):
    n = indices.shape[0]
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    diff = indices[:, None, :] - indices[None, :, :]
    within = (diff ** 2).sum(axis=2) <= d_c * d_c
    for i, j in np.argwhere(np.triu(within, k=1)):
        ri, rj = find(int(i)), find(int(j))
        if ri != rj:
            parent[ri] = rj
    groups = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return {frozenset(g) for g in groups.values()}


def test_criterion_05_clustering_oracle():
    rng = np.random.default_rng(123)
    checked = 0
    for _ in range(100):
        n = int(rng.integers(2, 501))
        side = int(rng.integers(15, 80))
        idx = np.unique(rng.integers(0, side, size=(n, 2)), axis=0)
        grid = GridSpec(x_range=(0.0, 32.0), y_range=(0.0, 32.0),
                        z_range=(0.0, 0.4), voxel_xy=0.25, voxel_z=0.4)
        cells = CellSet(coords=grid.cell_centers(idx), indices=idx)
        for d_c in (2, 3, 4):
            ours = {frozenset(c.tolist())
                    for c in bfs_cluster(cells, d_c).clusters}
            assert ours == _union_find_partition(idx, d_c)
        checked += 1
    assert checked == 100
    report(5, "bfs clustering equals the union-find closure on 100 random "
              "instances for d_c in {2, 3, 4}")


def test_criterion_06_ablation_trends(ablation_results):
    r1, r6, r8 = (ablation_results[k] for k in (1, 6, 8))
    for bucket in ("static", "fast"):
        base = r1.bucket(bucket).mean
        full = r8.bucket(bucket).mean
        rel = (base - full) / base
        assert rel >= 0.05, f"{bucket}: row8 {full:.4f} vs row1 {base:.4f}"
    fast_gain_c = (r1.bucket("fast").mean - r6.bucket("fast").mean) \
        / r1.bucket("fast").mean
    assert fast_gain_c >= 0.05
    report(6, "full loss beats sup-only by "
              f"{100 * (r1.bucket('static').mean - r8.bucket('static').mean) / r1.bucket('static').mean:.0f}% static / "
              f"{100 * (r1.bucket('fast').mean - r8.bucket('fast').mean) / r1.bucket('fast').mean:.0f}% fast; "
              f"adding the cluster term alone cuts fast error by {100 * fast_gain_c:.0f}%")


def test_criterion_07_divergence_correlation(divergence_states):
    recipes, res = divergence_states
    div, err = [], []
    for recipe, outcome in zip(recipes, res.scenes):
        seq = generate(recipe, CFG)
        rep = divergence_report(outcome.state.forward, outcome.state.backward,
                                seq.ground_truth)
        div.append(rep.divergences)
        err.append(rep.errors)
    div = np.concatenate(div)
    err = np.concatenate(err)
    rho = float(stats.spearmanr(div, err).statistic)
    assert rho > 0.3
    # the correlation is not an artifact of the zero-label background cells
    nz = (div > 1e-9) | (err > 1e-9)
    rho_nz = float(stats.spearmanr(div[nz], err[nz]).statistic)
    assert rho_nz > 0.3
    report(7, f"forward/backward divergence correlates with error "
              f"(Spearman {rho:.3f} overall, {rho_nz:.3f} on matched cells)")


def test_criterion_08_static_baseline_identity():
    recipe = recipe_suite("smoke")[2]  # single object at 8 m/s
    assert len(recipe.objects) == 1
    assert math.hypot(*recipe.objects[0].velocity) == 8.0
    seq = generate(recipe, CFG)
    gt = seq.ground_truth
    zero = MotionStack.zeros(gt.grid, CFG.T_prime, FORWARD, gt.valid)
    metrics = bucketed_errors(zero, gt, CFG)
    fast = metrics.bucket("fast")
    speeds = np.linalg.norm(gt.steps[-1], axis=2)
    gt_mean = speeds[speeds / (CFG.T_prime * CFG.frame_dt) > 5.0].mean()
    assert abs(fast.mean - gt_mean) < 1e-12
    assert abs(fast.mean - 8.0) < 1e-6
    report(8, f"zero-motion baseline scores the fast bucket at the mean GT "
              f"displacement ({fast.mean:.6f} m)")


def test_criterion_09_prewarp_improvement():
    for recipe in recipe_suite("smoke"):
        speeds = [math.hypot(*o.velocity) for o in recipe.objects]
        if max(speeds) == 0.0:
            continue
        seq = generate(recipe, CFG)
        state = optimize_scene(seq, CFG)
        errs = [e["forward"] for e in state.label_errors]
        assert len(errs) >= 2
        assert errs[1] <= errs[0] + 1e-12, f"{recipe.name}: {errs[:2]}"
    report(9, "pseudo-label error after round 2 is never worse than after "
              "round 1 on every moving smoke scene")


def test_criterion_10_command_determinism(tmp_path):
    cfg = dataclasses.replace(CFG, outer_rounds=2, opt_steps=40,
                              sinkhorn_iters=150)
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(cfg.to_json())

    def run_all(root):
        root.mkdir()
        scenes = root / "scenes"
        argv_sets = [
            ["synth", str(scenes), "--suite", "smoke", "--config",
             str(cfg_path), "--threads", "1"],
            ["pseudo", str(scenes / "smoke_slow"), "--config", str(cfg_path),
             "--direction", "both", "--out", str(root / "pseudo")],
            ["optimize", str(scenes / "smoke_slow"), "--config", str(cfg_path),
             "--out", str(root / "opt")],
            ["eval", str(root / "opt" / "forward.mfld"),
             str(scenes / "smoke_slow"), "--config", str(cfg_path),
             "--out", str(root / "metrics.json")],
            ["render", str(root / "opt" / "forward.mfld"),
             str(root / "img"), "--step", "5", "--max-mag", "4"],
            ["gradcheck", "--points", "40", "--seed", "11"],
        ]
        for argv in argv_sets:
            assert cli_main(argv) == 0

    run_all(tmp_path / "a")
    run_all(tmp_path / "b")

    compared = 0
    for pa in sorted((tmp_path / "a").rglob("*")):
        if pa.is_file():
            pb = tmp_path / "b" / pa.relative_to(tmp_path / "a")
            assert pb.is_file(), f"missing {pb}"
            assert pa.read_bytes() == pb.read_bytes(), f"differs: {pa.name}"
            compared += 1
    assert compared > 40  # manifests, frames, fields, stats, images
    report(10, f"all six commands reproduce byte-identical artifacts "
               f"({compared} files compared)")
