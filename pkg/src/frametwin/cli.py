"""Command-line entry points: gen-scene, twin, adapt, render, metrics.

Exit codes: 0 success, 1 usage, 2 validation or I/O, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import report as figures
from .config import Config
from .errors import FrameTwinError, InvalidArgument
from .field import save_checkpoint
from .formats import curves_to_dict, dump_json, load_curves, read_json, twin_to_dict, vertices_from_dict
from .geometry import DTYPE
from .optimize import construct_twin, write_trace
from .splat import CurveSet, load_cameras, read_pgm, render_views, save_cameras, write_pgm
from .synth import (
    SimConfig,
    adaptive_sim,
    chamfer_curves,
    edge_displacements,
    generate_scene,
    parse_oracle,
    printed_curves,
    render_graph,
)
from .wireframe import Edge, WireframeGraph, graph_from_dict, load_graph, partial_state, plan_from_dict, plan_to_dict, save_graph, validate_graph

log = logging.getLogger("frametwin")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer")
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _edge_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a comma-separated list of edge ids")


def _config(args, base: dict | None = None) -> Config:
    """Precedence, lowest first: ``base`` (e.g. a scene manifest), ``--config`` file, explicit flags."""
    merged = dict(base or {})
    if getattr(args, "config", None):
        file_cfg = read_json(args.config)
        if not isinstance(file_cfg, dict):
            raise InvalidArgument("config file must hold a JSON object")
        merged.update(file_cfg)
    for flag, key in (
        ("views", "views"),
        ("resolution", "resolution"),
        ("wbend", "w_bend"),
        ("p", "p"),
        ("max_iters", "max_iters"),
        ("bend_samples", "bend_samples"),
        ("tau", "tau"),
        ("kernels", "K"),
        ("seed", "seed"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            merged[key] = value
    return Config.load(None, merged)


def _load_plan(path):
    return plan_from_dict(read_json(path))


# --- commands ----------------------------------------------------------------------------------


def cmd_gen_scene(args) -> int:
    cfg = _config(args)
    graph = load_graph(args.model)
    plan = _load_plan(args.plan)
    oracle = parse_oracle(args.deform)
    scene = generate_scene(
        graph, plan, args.t, oracle, cfg.views, cfg.resolution, cfg.seed,
        noise=args.noise, missing_edges=args.missing or (), tau=cfg.tau, K=cfg.K, m=cfg.m,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_graph(graph, out / "model.json")
    dump_json(plan_to_dict(plan), out / "plan.json")
    save_cameras(scene.cameras, out / "cameras.json")
    ids = scene.partial.sorted_edges()
    dump_json(curves_to_dict(scene.gt_graph, printed_curves(scene.gt_graph, ids)), out / "gt_curves.json")
    files = ["model.json", "plan.json", "cameras.json", "gt_curves.json"]
    for i, img in enumerate(scene.images):
        write_pgm(out / f"view_{i}.pgm", img)
        files.append(f"view_{i}.pgm")
    extra = {"t": args.t, "deform": oracle.to_dict(), "noise": bool(args.noise), "missing": list(args.missing or [])}
    dump_json({"command": "gen-scene", "seed": cfg.seed, "config": cfg.to_dict(), "config_hash": cfg.hash(extra), **extra, "files": files + ["manifest.json"]}, out / "manifest.json")
    print(f"wrote {len(scene.images)} views to {out}")
    return 0


def cmd_twin(args) -> int:
    scene = Path(args.scene)
    if not scene.is_dir():
        raise InvalidArgument(f"scene directory {scene} does not exist")
    manifest = read_json(scene / "manifest.json")
    cfg = _config(args, manifest.get("config"))
    graph = load_graph(scene / "model.json")
    plan = _load_plan(scene / "plan.json")
    partial = partial_state(graph, plan, int(manifest["t"]))
    cams = load_cameras(scene / "cameras.json")
    images = [read_pgm(scene / f"view_{i}.pgm") for i in range(len(cams))]
    result = construct_twin(graph, partial, cams, images, cfg.twin_config(), cfg.loss_weights())
    out = Path(args.out or scene)
    out.mkdir(parents=True, exist_ok=True)
    dump_json(twin_to_dict(graph, result.twin, {"iterations": len(result.trace), "converged": result.converged}), out / "twin.json")
    write_trace(result.trace, out / "trace.csv")
    save_checkpoint(result.field, out / "field.bin")
    figures.plot_trace(result.trace, out / "trace.png")
    with torch.no_grad():
        ids = result.edge_ids
        rendered = render_views(CurveSet.from_graph(graph, ids), result.tau, result.alpha, result.field, cams, cfg.K, cfg.m)
    figures.plot_views(rendered, images, out / "views.png")
    extra = {"scene": str(manifest.get("config_hash")), "t": manifest["t"]}
    dump_json({"command": "twin", "seed": cfg.seed, "config": cfg.to_dict(), "config_hash": cfg.hash(extra), **extra,
               "files": ["twin.json", "trace.csv", "trace.png", "views.png", "field.bin", "field.bin.json", "manifest.json"]}, out / "manifest.json")
    last = result.trace[-1]
    print(f"{len(result.trace)} iterations, l_total {result.trace[0].l_total:.6g} -> {last.l_total:.6g}")
    return 0


def cmd_adapt(args) -> int:
    cfg = _config(args)
    graph = load_graph(args.model)
    plan = _load_plan(args.plan)
    specs = args.deform or ["none"]
    if len(specs) == 1:
        specs = specs * len(plan.batches)
    if len(specs) != len(plan.batches):
        raise InvalidArgument(f"{len(specs)} deformations for {len(plan.batches)} batches")
    oracles = [parse_oracle(s) for s in specs]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sim = SimConfig(cfg.twin_config(), cfg.loss_weights(), cfg.views, cfg.resolution, cfg.seed, args.noise)
    rep = adaptive_sim(graph, plan, oracles, sim, run_dir=out)
    (out / "report.json").write_text(rep.to_json())
    for rec in rep.rounds:
        dump_json(rec.working_plan, out / f"round_{rec.t}" / "plan.json")
        write_trace(rec.trace, out / f"round_{rec.t}" / "trace.csv")
    if rep.final_plan is not None:
        save_graph(rep.final_plan, out / "final_plan.json")
    if rep.rounds:
        figures.plot_rounds(rep.rounds, out / "rounds.png")
        figures.plot_traces({f"round {r.t}": r.trace for r in rep.rounds}, out / "traces.png")
    extra = {"deform": [o.to_dict() for o in oracles], "noise": bool(args.noise)}
    dump_json({"command": "adapt", "seed": cfg.seed, "config": cfg.to_dict(), "config_hash": cfg.hash(extra), **extra}, out / "manifest.json")
    if rep.aborted:
        print(f"aborted: {rep.error}", file=sys.stderr)
        return 3
    print(f"{len(rep.rounds)} rounds written to {out}")
    return 0


def _curve_source(path, plan_path=None, t=None):
    """Curves plus optional tau/alpha; a model JSON may be restricted to the first t batches."""
    data = read_json(path)
    if data.get("edges") and "id" not in data["edges"][0]:
        graph = graph_from_dict(data)
        validate_graph(graph).raise_if_invalid()
        ids = list(range(len(graph.edges)))
        if plan_path is not None:
            ids = partial_state(graph, _load_plan(plan_path), t).sorted_edges()
        return graph, ids, None, None
    curves, ends, tau, alpha = load_curves(path)
    verts = vertices_from_dict(data)
    ids = sorted(curves)
    if plan_path is not None:
        raise InvalidArgument("--plan/--t only apply to wireframe model files")
    nv = max(max(verts, default=-1), max((max(e) for e in ends.values()), default=-1)) + 1
    vpos = torch.zeros(nv, 3, dtype=DTYPE)
    for v, p in verts.items():
        vpos[v] = p
    # edge ids index the graph positionally; ids absent from the file get placeholders that are never read
    placeholder = Edge(ends[ids[0]], curves[ids[0]])
    edges = [Edge(ends[k], curves[k]) if k in curves else placeholder for k in range(max(ids) + 1)]
    graph = WireframeGraph(vpos, edges, data.get("units", "mm"))
    return graph, ids, tau or None, alpha or None


def cmd_render(args) -> int:
    cfg = _config(args)
    graph, ids, tau, alpha = _curve_source(args.model, args.plan, args.t)
    cams = load_cameras(args.cameras)
    if not 0 <= args.camera < len(cams):
        raise InvalidArgument(f"camera index {args.camera} out of range (have {len(cams)})")
    cam = cams[args.camera]
    if tau is None:
        img = render_graph(graph, ids, [cam], cfg.tau, cfg.K, cfg.m)[0]
    else:
        K = len(next(iter(tau.values())))
        T = torch.as_tensor(np.stack([tau[k] for k in ids]))
        A = torch.as_tensor(np.stack([alpha[k] for k in ids]))
        with torch.no_grad():
            img = render_views(CurveSet.from_graph(graph, ids), T, A, None, [cam], K, cfg.m)[0]
    write_pgm(args.out, img)
    print(f"wrote {args.out}")
    return 0


def cmd_metrics(args) -> int:
    ga, ids_a, _, _ = _curve_source(args.a, args.plan, args.t) if args.plan else _curve_source(args.a)
    gb, ids_b, _, _ = _curve_source(args.b, args.plan, args.t) if args.plan else _curve_source(args.b)
    if ids_a != ids_b:
        raise InvalidArgument(f"edge sets differ: {len(ids_a)} vs {len(ids_b)} edges")
    a, b = printed_curves(ga, ids_a), printed_curves(gb, ids_b)
    ch = chamfer_curves(a, b)
    lo, hi = gb.bbox(ids_b)
    diag = float(np.linalg.norm(hi - lo))
    disp = edge_displacements(a, b)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "edge", "value"])
    w.writerow(["chamfer", "", f"{ch:.17g}"])
    w.writerow(["chamfer_normalized", "", f"{ch / diag if diag > 0 else 0.0:.17g}"])
    w.writerow(["e_max", "", f"{max(disp.values(), default=0.0):.17g}"])
    for k, v in disp.items():
        w.writerow(["edge_displacement", k, f"{v:.17g}"])
    if args.out:
        Path(args.out).write_text(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return 0


# --- parser ------------------------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with config overrides")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=_positive_int, help="cap on worker threads")


def _tunables(p: argparse.ArgumentParser) -> None:
    p.add_argument("--views", type=_positive_int)
    p.add_argument("--resolution", type=_positive_int)
    p.add_argument("--tau", type=float, help="nominal strut radius (mm)")
    p.add_argument("--kernels", type=_positive_int, help="Gaussian kernels per edge")


def _opt_tunables(p: argparse.ArgumentParser) -> None:
    p.add_argument("--wbend", type=float, help="bending weight (0 disables the regularizer)")
    p.add_argument("--p", type=float, help="exponent of the distance-adaptive bending weight")
    p.add_argument("--max-iters", dest="max_iters", type=_positive_int)
    p.add_argument("--bend-samples", dest="bend_samples", type=_positive_int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="frametwin", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("gen-scene", help="render synthetic target views of a deformed partial print")
    _common(p)
    _tunables(p)
    p.add_argument("--model", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--t", type=_positive_int, required=True, help="number of printed batches")
    p.add_argument("--deform", default="none", help="oracle, e.g. sag:0.05 or translate:1,0,0")
    p.add_argument("--noise", action="store_true", help="add uniform +-1/255 pixel noise")
    p.add_argument("--missing", type=_edge_list, help="printed edges absent from the images")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("twin", help="construct the digital twin of a scene directory")
    _common(p)
    _opt_tunables(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_twin)

    p = sub.add_parser("adapt", help="simulate adaptive printing over all batches")
    _common(p)
    _tunables(p)
    _opt_tunables(p)
    p.add_argument("--model", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--deform", action="append", help="oracle per round (repeat), or one for all rounds")
    p.add_argument("--noise", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("render", help="render a model or twin from one camera to PGM")
    _common(p)
    p.add_argument("--tau", type=float)
    p.add_argument("--kernels", type=_positive_int)
    p.add_argument("--model", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--camera", type=int, default=0)
    p.add_argument("--plan")
    p.add_argument("--t", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("metrics", help="Chamfer, E_max and per-edge displacement of two curve sets")
    _common(p)
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--plan")
    p.add_argument("--t", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "plan", None) is not None and getattr(args, "t", None) is None and args.command in ("render", "metrics"):
        parser.error("--plan requires --t")
    if getattr(args, "threads", None):
        torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except FrameTwinError as exc:
        print(f"frametwin: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, KeyError, ValueError) as exc:
        print(f"frametwin: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
