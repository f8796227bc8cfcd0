"""Acceptance criteria, each at its stated tolerance.

Every test prints one ``ACCEPTANCE <n> PASS|FAIL: ...`` line (visible with
``pytest -v``; the lines are also collected in the terminal summary).  The
heavy scenes share one reference run of the bent-strut cube.
"""

from __future__ import annotations

import statistics
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from frametwin.cli import main as cli_main
from frametwin.field import DeformationField, GradientAccumulator, field_eval, grad_of_scalar
from frametwin.formats import dump_json
from frametwin.geometry import DTYPE, BezierCurve, eval_derivative, eval_points, refit_curve, sample_curve, transport_frames
from frametwin.optimize import (
    LossWeights,
    TwinConfig,
    construct_twin,
    default_fd_step,
    loss_bend,
    loss_img,
    mean_laplacian_magnitude,
    model_domain,
)
from frametwin.splat import CurveSet, build_kernels, deform_curves, render_kernels, render_views, to_bytes
from frametwin.synth import (
    DeformOracle,
    SimConfig,
    adaptive_sim,
    apply_oracle,
    chamfer_curves,
    generate_scene,
    make_cameras,
    parse_oracle,
    printed_curves,
    render_graph,
)
from frametwin.wireframe import Edge, PartialState, PrintPlan, WireframeGraph, cube_graph, plan_to_dict, printed_samples, save_graph

from conftest import random_cubic

pytestmark = pytest.mark.acceptance

# The bent-strut cube: bottom square and verticals printed, the corner strut at (0, 0)
# bent 1.5 mm along +x at its tip (the field decays away from that corner).
BENT = "tip_bend:x:0.015@0,0,3"
PLAN = PrintPlan([[0, 1, 2, 3, 4, 5, 6, 7], [8, 9, 10, 11]])
ITERS = 150
WEIGHTS = LossWeights(bend_samples=512)

SUMMARY: list[str] = []


@pytest.fixture
def emit(capsys):
    def _emit(n: int, ok: bool, detail: str) -> None:
        line = f"ACCEPTANCE {n:2d} {'PASS' if ok else 'FAIL'}: {detail}"
        SUMMARY.append(line)
        with capsys.disabled():
            print("\n" + line)

    return _emit


# --- shared scenes -------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def cube():
    return cube_graph(10.0)


def _scene(cube, views=8, **kw):
    return generate_scene(cube, PLAN, 1, parse_oracle(BENT), n_views=views, resolution=256, **kw)


def _fit(cube, sc, cfg=TwinConfig(max_iters=ITERS), weights=WEIGHTS):
    stamps = []
    start = time.perf_counter()
    result = construct_twin(cube, sc.partial, sc.cameras, sc.images, cfg, weights, callback=lambda i, row: stamps.append(time.perf_counter() - start))
    return result, stamps


def _chamfer_vs_gt(result, sc):
    gt = printed_curves(sc.gt_graph, result.edge_ids)
    return chamfer_curves(result.twin.deformed_edges, gt)


@pytest.fixture(scope="module")
def bent_scene(cube):
    return _scene(cube)


@pytest.fixture(scope="module")
def reference_run(cube, bent_scene):
    return _fit(cube, bent_scene)


# --- 1 --------------------------------------------------------------------------------------------


def test_01_zero_init_identity(cube, emit):
    start = time.perf_counter()
    sc = generate_scene(cube, PLAN, 1, DeformOracle(), n_views=8, resolution=256)
    fld = DeformationField.create(model_domain(cube), seed=0)
    x = torch.as_tensor(np.random.default_rng(0).uniform(-5, 15, (1000, 3)), dtype=DTYPE)
    max_d = float(field_eval(fld, x).abs().max())
    ids = sc.partial.sorted_edges()
    E = len(ids)
    with torch.no_grad():
        twin = render_views(CurveSet.from_graph(cube, ids), torch.full((E, 32), 0.3, dtype=DTYPE), torch.ones(E, 32, dtype=DTYPE), fld, sc.cameras)
    planned = render_graph(cube, ids, sc.cameras, 0.3)
    same = all(np.array_equal(to_bytes(a), to_bytes(b)) for a, b in zip(twin, planned))
    elapsed = time.perf_counter() - start
    ok = max_d == 0.0 and same and elapsed < 5.0
    emit(1, ok, f"max |d|={max_d:g} over 1000 points, 8 views byte-identical={same}, {elapsed:.2f}s (<5s)")
    assert ok


# --- 2 --------------------------------------------------------------------------------------------


def _two_edge_scene():
    verts = torch.tensor([[0, 0, 0], [4, 0, 0], [4, 0, 4]], dtype=DTYPE)
    c1 = torch.tensor([[0, 0, 0], [1.3, 0.4, 0.2], [2.7, -0.3, 0.1], [4, 0, 0]], dtype=DTYPE)
    c2 = torch.tensor([[4, 0, 0], [4.3, 0.2, 1.3], [3.8, -0.2, 2.7], [4, 0, 4]], dtype=DTYPE)
    g = WireframeGraph(verts, [Edge((0, 1), BezierCurve(c1)), Edge((1, 2), BezierCurve(c2))])
    partial = PartialState(frozenset({0, 1}), frozenset({0, 1, 2}))
    cams = make_cameras(2, g.bbox(), 32, 32, azimuth0_deg=30.0)
    gt = apply_oracle(g, partial, parse_oracle("translate:0.2,0.1,-0.15"))
    return g, partial, cams, render_graph(gt, [0, 1], cams, 0.3, K=8)


def test_02_gradient_correctness(emit):
    start = time.perf_counter()
    g, partial, cams, images = _two_edge_scene()
    K = 8
    domain = model_domain(g)
    fld = DeformationField.create(domain, seed=0)
    gen = torch.Generator().manual_seed(1)
    with torch.no_grad():  # move away from the zero-output init so every layer carries gradient
        for b in fld.params.biases:
            b.add_(0.05 * torch.randn(b.shape, generator=gen, dtype=DTYPE))
        fld.params.weights[-1].copy_(0.02 * torch.randn(fld.params.weights[-1].shape, generator=gen, dtype=DTYPE))
    tau = 0.3 + 0.05 * torch.rand(2, K, generator=gen, dtype=DTYPE)
    alpha = 0.6 + 0.3 * torch.rand(2, K, generator=gen, dtype=DTYPE)
    curves = CurveSet.from_graph(g, [0, 1])
    printed = printed_samples(partial, g)
    weights = LossWeights(w_bend=1e-3, bend_samples=256)  # large enough that L_bend shows in L_total
    h = default_fd_step(g.bbox())

    def l_total():
        ctrl, _ = deform_curves(curves, fld)
        ks = build_kernels(ctrl, K, tau, alpha)
        li = loss_img([render_kernels(c, ks) for c in cams], images)
        return li + weights.w_bend * loss_bend(fld, printed, weights, domain, h, seed=0, iteration=1)

    acc = GradientAccumulator(fld, tau, alpha)
    acc.record(l_total())
    grads = grad_of_scalar(acc).all()
    params = acc.sources()
    for p in params:
        p.requires_grad_(False)

    rng = np.random.default_rng(0)
    n_theta = len(params) - 2
    sizes = np.array([p.numel() for p in params[:n_theta]], dtype=float)
    picks = [int(rng.choice(n_theta, p=sizes / sizes.sum())) for _ in range(30)] + [n_theta] * 10 + [n_theta + 1] * 10
    worst = 0.0
    for i in picks:
        flat = params[i].view(-1)
        j = int(rng.integers(flat.numel()))
        old = float(flat[j])
        step = 1e-6 * max(1.0, abs(old))
        flat[j] = old + step
        up = float(l_total())
        flat[j] = old - step
        dn = float(l_total())
        flat[j] = old
        fd = (up - dn) / (2 * step)
        an = float(grads[i].reshape(-1)[j])
        worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), 1e-8))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-3 and elapsed < 120
    emit(2, ok, f"max relative error {worst:.2e} over 50 coordinates (30 theta, 10 tau, 10 alpha) (<1e-3), {elapsed:.1f}s (<2min)")
    assert ok


# --- 3 --------------------------------------------------------------------------------------------


def test_03_refit_exactness(emit):
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        c = random_cubic(rng)
        A = torch.as_tensor(rng.normal(size=(3, 3)), dtype=DTYPE)
        t = torch.as_tensor(rng.normal(size=3), dtype=DTYPE)
        s = sample_curve(c, 64)
        out = refit_curve(s, s.points @ A.T + t, 3)
        worst = max(worst, float((out.ctrl - (c.ctrl @ A.T + t)).abs().max()))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and elapsed < 1.0
    emit(3, ok, f"max control-point error {worst:.2e} over 100 affine trials (<=1e-9), {elapsed:.3f}s (<1s)")
    assert ok


# --- 4 --------------------------------------------------------------------------------------------


def _max_rotation(F):
    R = F[:-1].transpose(-1, -2) @ F[1:]
    cos = ((R.diagonal(dim1=-2, dim2=-1).sum(-1) - 1) / 2).clamp(-1, 1)
    return float(torch.arccos(cos).max())


def test_04_bishop_frames(emit):
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    eye = torch.eye(3, dtype=DTYPE)
    worst_orth, worst_det, ratios = 0.0, 0.0, []
    for _ in range(100):
        c = random_cubic(rng)
        rot = []
        for M in (32, 64):
            u = torch.arange(M + 1, dtype=DTYPE) / M
            F = transport_frames(eval_points(c.ctrl, u), eval_derivative(c.ctrl, u))
            worst_orth = max(worst_orth, float((F.transpose(-1, -2) @ F - eye).abs().max()))
            worst_det = max(worst_det, float((torch.linalg.det(F) - 1).abs().max()))
            rot.append(_max_rotation(F))
        ratios.append(rot[0] / rot[1])
    elapsed = time.perf_counter() - start
    ok = worst_orth <= 1e-9 and worst_det <= 1e-9 and all(1.0 <= r <= 4.0 for r in ratios) and elapsed < 5.0
    emit(4, ok, f"orthonormality {worst_orth:.1e}, det {worst_det:.1e} (<=1e-9); halving ratio in [{min(ratios):.3f}, {max(ratios):.3f}] (2 +- factor 2); {elapsed:.2f}s (<5s)")
    assert ok


# --- 5 & 6 ----------------------------------------------------------------------------------------


def test_05_convergence(reference_run, emit):
    result, stamps = reference_run
    trace = result.trace
    at150 = trace[min(ITERS, len(trace)) - 1].l_total
    ratio = at150 / trace[0].l_total
    t150 = stamps[min(ITERS, len(stamps)) - 1]
    ok = ratio <= 0.15 and t150 <= 300
    emit(5, ok, f"L_total(150)/L_total(1) = {ratio:.4f} (<=0.15), {len(trace)} iterations, {t150:.0f}s (<=300s)")
    assert ok


def test_06_reconstruction_quality(cube, bent_scene, reference_run, emit):
    result, _ = reference_run
    sc = bent_scene
    ids = result.edge_ids
    ch_twin = _chamfer_vs_gt(result, sc)
    ch_planned = chamfer_curves(printed_curves(cube, ids), printed_curves(sc.gt_graph, ids))
    novel = make_cameras(4, cube.bbox(), 256, 256, elevation_deg=50.0, azimuth0_deg=22.5)
    curves = CurveSet.from_graph(cube, ids)
    with torch.no_grad():
        fit_in = render_views(curves, result.tau, result.alpha, result.field, sc.cameras)
        fit_novel = render_views(curves, result.tau, result.alpha, result.field, novel)
    gt_novel = render_graph(sc.gt_graph, ids, novel, 0.3)
    res_in = float(np.mean([float((a - b).abs().mean()) for a, b in zip(fit_in, sc.images)]))
    res_novel = float(np.mean([float((a - b).abs().mean()) for a, b in zip(fit_novel, gt_novel)]))
    ok = ch_twin <= 0.25 * ch_planned and res_novel <= 2.0 * res_in
    emit(6, ok, f"Chamfer twin {ch_twin:.4f} vs planned {ch_planned:.4f} mm (ratio {ch_twin / ch_planned:.3f} <=0.25); "
               f"novel-view L1/px {res_novel:.2e} vs input {res_in:.2e} (ratio {res_novel / res_in:.2f} <=2)")
    assert ok


# --- 7 --------------------------------------------------------------------------------------------


def test_07_view_count_study(cube, bent_scene, reference_run, emit):
    start = time.perf_counter()
    means, per_seed = {}, {}
    for views in (4, 6, 8):
        sc = bent_scene if views == 8 else _scene(cube, views)
        values = []
        for seed in (0, 1, 2):
            if views == 8 and seed == 0:
                values.append(_chamfer_vs_gt(reference_run[0], sc))  # identical configuration
                continue
            result, _ = _fit(cube, sc, TwinConfig(max_iters=ITERS, seed=seed))
            values.append(_chamfer_vs_gt(result, sc))
        means[views] = statistics.fmean(values)
        per_seed[views] = "/".join(f"{v:.4f}" for v in values)
    elapsed = time.perf_counter() - start + reference_run[1][-1]
    ok = means[8] <= means[6] <= means[4] and elapsed <= 900
    emit(7, ok, f"mean Chamfer 4/6/8 views = {means[4]:.4f}/{means[6]:.4f}/{means[8]:.4f} mm (non-increasing; per seed {per_seed[4]} | {per_seed[6]} | {per_seed[8]}), {elapsed:.0f}s (<=900s)")
    assert ok


# --- 8 --------------------------------------------------------------------------------------------


def test_08_opacity_ablation(cube, emit):
    missing = 7
    sc = _scene(cube, missing_edges=[missing])
    result, _ = _fit(cube, sc)
    rows = {k: result.alpha[i] for i, k in enumerate(result.edge_ids)}
    frac_low = float((rows[missing] < 0.5).to(DTYPE).mean())
    present = torch.cat([a for k, a in rows.items() if k != missing])
    median = float(present.median())
    ok = frac_low >= 0.8 and median >= 0.5
    emit(8, ok, f"absent strut: {frac_low:.0%} of kernels alpha<0.5 (>=80%); present struts median alpha {median:.3f} (>=0.5)")
    assert ok


# --- 9 --------------------------------------------------------------------------------------------


def _first_reaching(trace, target):
    base = trace[0].l_total
    for row in trace:
        if row.l_total / base <= target:
            return row.iteration
    return None


def test_09_bending_ablation(cube, bent_scene, reference_run, emit):
    ref, _ = reference_run
    unreg, _ = _fit(cube, bent_scene, weights=LossWeights(w_bend=0.0, bend_samples=WEIGHTS.bend_samples))
    uniform, _ = _fit(cube, bent_scene, weights=LossWeights(p_exponent=0.0, bend_samples=WEIGHTS.bend_samples))
    domain = model_domain(cube)
    h = default_fd_step(cube.bbox())
    lap_ref = mean_laplacian_magnitude(ref.field, domain, h)
    lap_unreg = mean_laplacian_magnitude(unreg.field, domain, h)
    target = uniform.trace[-1].l_total / uniform.trace[0].l_total
    reached = _first_reaching(ref.trace, target)
    ok_lap = lap_ref < lap_unreg
    ok_p = reached is not None and reached <= len(uniform.trace)
    emit(9, ok_lap and ok_p, f"mean |Lap d| w=1e-7 {lap_ref:.6g} vs w=0 {lap_unreg:.6g} (strictly lower: {ok_lap}); "
                             f"p=2 reaches p=0 final normalized loss {target:.4f} at iteration {reached} vs {len(uniform.trace)} (<=: {ok_p})")
    assert ok_lap and ok_p


# --- 10 -------------------------------------------------------------------------------------------


def test_10_blending_invariants(cube, emit):
    plan = PrintPlan([[0, 1, 2, 3, 4, 5], [6, 7, 8, 9, 10, 11]])  # leaves struts with one printed end
    cfg = SimConfig(TwinConfig(max_iters=30), WEIGHTS, n_views=4, resolution=64)
    moved = adaptive_sim(cube, plan, [parse_oracle("translate:0.3,0,0")] * 2, cfg)
    worst_printed, worst_free, half = 0.0, 0.0, 0
    for rec in moved.rounds:
        for k in rec.half_blended:
            half += 1
            s, e = cube.edges[k].v
            ctrl = np.asarray(rec.working_plan["edges"][k]["ctrl"])
            ends = {s: ctrl[0], e: ctrl[-1]}
            printed_end = s if s in rec.deformed_vertices else e
            free_end = e if printed_end == s else s
            worst_printed = max(worst_printed, float(np.abs(ends[printed_end] - np.asarray(rec.deformed_vertices[printed_end])).max()))
            worst_free = max(worst_free, float(np.abs(ends[free_end] - cube.vertices[free_end].numpy()).max()))
    still = adaptive_sim(cube, plan, [DeformOracle()] * 2, cfg)
    drift = max(float((a.curve.ctrl - b.curve.ctrl).abs().max()) for a, b in zip(still.final_plan.edges, cube.edges))
    ok = moved.complete and still.complete and half > 0 and worst_printed <= 1e-9 and worst_free <= 1e-9 and drift <= 1e-6
    emit(10, ok, f"{half} half-blended edges: printed end {worst_printed:.1e}, free end {worst_free:.1e} (<=1e-9); zero-oracle plan drift {drift:.1e} (<=1e-6)")
    assert ok


# --- 11 -------------------------------------------------------------------------------------------


def _tree(root: Path) -> dict[str, bytes]:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_11_cli_determinism(cube, tmp_path, emit):
    save_graph(cube, tmp_path / "cube.json")
    dump_json(plan_to_dict(PLAN), tmp_path / "plan.json")
    quick = ["--views", "4", "--resolution", "64"]
    opt = ["--max-iters", "10", "--bend-samples", "256"]
    commands = {
        "gen-scene": lambda out: ["gen-scene", "--model", str(tmp_path / "cube.json"), "--plan", str(tmp_path / "plan.json"), "--t", "1", "--deform", BENT, "--noise", *quick, "--out", str(out)],
        "twin": lambda out: ["twin", "--scene", str(tmp_path / "gen-scene_a"), *opt, "--out", str(out)],
        "render": lambda out: ["render", "--model", str(tmp_path / "twin_a" / "twin.json"), "--cameras", str(tmp_path / "gen-scene_a" / "cameras.json"), "--out", str(out / "view.pgm")],
        "metrics": lambda out: ["metrics", "--a", str(tmp_path / "twin_a" / "twin.json"), "--b", str(tmp_path / "gen-scene_a" / "gt_curves.json"), "--out", str(out / "metrics.csv")],
        "adapt": lambda out: ["adapt", "--model", str(tmp_path / "cube.json"), "--plan", str(tmp_path / "plan.json"), "--deform", BENT, "--deform", "none", *quick, "--max-iters", "5", "--bend-samples", "256", "--out", str(out)],
    }
    identical = {}
    for name, argv in commands.items():
        trees = []
        for tag in ("a", "b"):
            out = tmp_path / f"{name}_{tag}"
            out.mkdir(exist_ok=True)
            assert cli_main(argv(out)) == 0, name
            trees.append(_tree(out))
        identical[name] = trees[0] == trees[1] and bool(trees[0])
    ok = all(identical.values())
    emit(11, ok, "byte-identical reruns: " + ", ".join(f"{k}={v}" for k, v in identical.items()))
    assert ok
