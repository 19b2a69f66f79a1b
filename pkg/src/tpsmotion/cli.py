"""Command-line front end (``tpsm``).

Exit codes: 0 success, 1 input or usage error, 2 numeric non-convergence
(or, for ``diagnose``, constraint residuals above tolerance). The
``TPSM_THREADS`` environment variable caps worker threads in ``animate``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import io
from .errors import ContractError, DegenerateError, TpsMotionError
from .estimation import FitConfig, FitProblem, fit_keypoints, grid_init, probe_pixels
from .geometry import (
    AffineTransform,
    apply_tps,
    bending_energy,
    side_condition_residual,
    solve_tps,
)
from .losses import bg_consistency_loss, equivariance_loss
from .motion import (
    DenseFlow,
    DropoutPlan,
    SamplingGrid,
    combine_flows,
    dropout_contributions,
    softmax_contributions,
    synthetic_logits,
)
from .sampler import bilinear_warp, apply_mask, warp_mask_pyramid

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2
DEFAULT_SIGMA = 0.25
CONSTRAINT_TOL = 1e-6


class UsageError(TpsMotionError):
    pass


def _size(text: str) -> SamplingGrid:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
        return SamplingGrid(h, w)
    except (ValueError, ContractError):
        raise argparse.ArgumentTypeError(f"size must look like HxW with positive sides, got {text!r}")


def _threads() -> int:
    raw = os.environ.get("TPSM_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise UsageError(f"TPSM_THREADS must be a positive integer, got {raw!r}")
    return n


def _solve_frame(frame: io.KeypointFrame, index: int) -> list:
    out = []
    for k in range(len(frame.driving)):
        try:
            # backward flow: kernels sit on driving keypoints, targets are source keypoints
            out.append(solve_tps(frame.driving[k], frame.source[k]))
        except DegenerateError as exc:
            raise DegenerateError(f"frame {index}, transform {k}: {exc}") from exc
    return out


def _logits(args, frame: io.KeypointFrame, grid: SamplingGrid, k: int):
    if getattr(args, "contribs", None):
        logits = np.load(args.contribs)
        if logits.shape != (k + 1,) + grid.shape:
            raise ContractError(
                f"contribution file has shape {logits.shape}, expected {(k + 1,) + grid.shape}"
            )
        return logits
    sigma = args.synthetic_contribs if getattr(args, "synthetic_contribs", None) else DEFAULT_SIGMA
    return synthetic_logits(frame.driving, grid, sigma)


def _frame_flow(frame, index, grid, logits, plan=None) -> DenseFlow:
    tps = _solve_frame(frame, index)
    contribs = softmax_contributions(logits) if plan is None else dropout_contributions(logits, plan)
    return combine_flows(tps, frame.background, contribs, grid)


def _displacement_stats(flow: DenseFlow) -> dict:
    mag = np.linalg.norm(flow.pixel_displacement(), axis=-1)
    return {"mean_displacement": float(mag.mean()), "max_displacement": float(mag.max())}


def _json_out(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1) + "\n")


def cmd_solve(args) -> int:
    doc = io.read_keypoints(args.keypoints)
    frame = doc.frame(args.frame)
    tps = _solve_frame(frame, args.frame)
    _json_out(
        {
            "version": 1,
            "frame": args.frame,
            "K": doc.k,
            "N": doc.n,
            "bg": frame.background.matrix.tolist(),
            "transforms": [
                {
                    "index": k,
                    "affine": t.affine.matrix.tolist(),
                    "weights": t.weights.tolist(),
                    "centers": t.centers.tolist(),
                }
                for k, t in enumerate(tps)
            ],
        },
        args.out,
    )
    return EXIT_OK


def cmd_flow(args) -> int:
    doc = io.read_keypoints(args.keypoints)
    frame = doc.frame(args.frame)
    grid = args.size
    logits = _logits(args, frame, grid, doc.k)
    plan = None
    if args.dropout is not None:
        plan = DropoutPlan.draw(args.dropout, doc.k, args.seed)
        print(json.dumps({"dropout_plan": plan.as_dict()}), file=sys.stderr)
    io.write_flow(_frame_flow(frame, args.frame, grid, logits, plan), args.out)
    return EXIT_OK


def cmd_warp(args) -> int:
    image = io.read_image(args.image)
    flow = io.read_flow(args.flow)
    out = bilinear_warp(image, flow, args.border)
    if args.mask:
        out = apply_mask(out, io.read_mask(args.mask))
    io.write_image(out, args.out)
    return EXIT_OK


def cmd_animate(args) -> int:
    image = io.read_image(args.image)
    doc = io.read_keypoints(args.keypoints)
    if not doc.frames:
        raise ContractError("keypoint document has no frames")
    grid = args.size
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)

    def render(i):
        frame = doc.frames[i]
        flow = _frame_flow(frame, i, grid, synthetic_logits(frame.driving, grid, DEFAULT_SIGMA))
        name = f"frame_{i + 1:04d}.png"
        io.write_image(bilinear_warp(image, flow), outdir / name)
        # no occlusion estimate is available, so every level's mask is all ones
        levels = warp_mask_pyramid(image, flow, _ones(image, args.levels), args.levels)
        return {
            "frame": i,
            "file": name,
            **_displacement_stats(flow),
            "levels": [
                {"shape": list(lv.shape[1:]), "mean_intensity": float(lv.mean())} for lv in levels
            ],
        }

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        entries = list(pool.map(render, range(len(doc.frames))))
    _json_out({"version": 1, "size": list(grid.shape), "frames": entries}, outdir / "manifest.json")
    return EXIT_OK


def _ones(feat, levels):
    h, w = feat.shape[1:]
    out = []
    for _ in range(levels):
        out.append(np.ones((h, w)))
        h, w = max(1, h // 2), max(1, w // 2)
    return out


def cmd_diagnose(args) -> int:
    doc = io.read_keypoints(args.keypoints)
    frame = doc.frame(args.frame)
    status = EXIT_OK
    for k in range(doc.k):
        try:
            t = solve_tps(frame.driving[k], frame.source[k])
        except DegenerateError as exc:
            print(f"transform {k}: DEGENERATE ({exc})")
            status = EXIT_INPUT
            continue
        resid = float(np.max(np.abs(apply_tps(t, frame.driving[k]) - frame.source[k])))
        print(
            f"transform {k}: constraint_residual={resid:.3e} "
            f"side_condition_residual={side_condition_residual(t):.3e} "
            f"bending_energy={bending_energy(t):.6e} "
            f"equivariance={equivariance_loss(frame.source[k], t, frame.driving[k]):.3e}"
        )
        if resid >= CONSTRAINT_TOL and status == EXIT_OK:
            status = EXIT_NUMERIC
    if args.bg_pair:
        pair = json.loads(Path(args.bg_pair).read_text())
        loss = bg_consistency_loss(
            AffineTransform.from_flat(pair["forward"]), AffineTransform.from_flat(pair["backward"])
        )
        print(f"bg_consistency_loss={loss:.6e}")
    return status


def cmd_fit(args) -> int:
    flow = io.read_flow(args.flow)
    grid = flow.grid
    if args.init:
        init_doc = io.read_keypoints(args.init)
        if (init_doc.k, init_doc.n) != (args.k, args.n):
            raise ContractError(
                f"init document has K={init_doc.k}, N={init_doc.n}; expected K={args.k}, N={args.n}"
            )
        frame = init_doc.frame(0)
    else:
        driving, source = grid_init(args.k, args.n)
        frame = io.KeypointFrame(source, driving)
    logits = _logits(args, frame, grid, args.k)
    problem = FitProblem(
        flow,
        args.k,
        args.n,
        softmax_contributions(logits),
        bg=frame.background,
        sample_pixels=probe_pixels(grid, full=args.full_grid),
    )
    report = fit_keypoints(
        problem, (frame.driving, frame.source), FitConfig(max_iter=args.max_iter, tol=args.tol)
    )
    out_doc = io.KeypointDocument(
        args.k, args.n, [io.KeypointFrame(report.source, report.driving, frame.bg)]
    )
    io.write_keypoints(out_doc, args.out)
    _json_out(report.as_dict(), report_path(args.out))
    print(
        f"converged={report.converged} reason={report.reason} "
        f"residual_rms={report.residual_rms:.3e} iterations={report.iterations}",
        file=sys.stderr,
    )
    return EXIT_OK if report.converged else EXIT_NUMERIC


def report_path(out) -> Path:
    out = Path(out)
    return out.with_name(out.stem + ".report.json")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tpsm", description="Thin-plate-spline motion toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="solve the K TPS transforms of one frame")
    p.add_argument("--keypoints", required=True)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("flow", help="write the dense backward flow of one frame")
    p.add_argument("--keypoints", required=True)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--size", type=_size, required=True, help="HxW")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--contribs", help=".npy logits of shape (K+1, H, W)")
    src.add_argument("--synthetic-contribs", type=float, metavar="SIGMA")
    p.add_argument("--dropout", type=float, metavar="P")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("warp", help="backward-warp an image with a flow")
    p.add_argument("--image", required=True)
    p.add_argument("--flow", required=True)
    p.add_argument("--mask")
    p.add_argument("--border", choices=("clamp", "zero"), default="clamp")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_warp)

    p = sub.add_parser("animate", help="warp a source image by every keypoint frame")
    p.add_argument("--image", required=True)
    p.add_argument("--keypoints", required=True)
    p.add_argument("--size", type=_size, required=True, help="HxW")
    p.add_argument("--outdir", required=True)
    p.add_argument("--levels", type=int, default=1)
    p.set_defaults(func=cmd_animate)

    p = sub.add_parser("diagnose", help="constraint, energy and consistency checks")
    p.add_argument("--keypoints", required=True)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--bg-pair", help='JSON {"forward": [6], "backward": [6]}')
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("fit", help="recover keypoints from a flow file")
    p.add_argument("--flow", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    init = p.add_mutually_exclusive_group()
    init.add_argument("--init")
    init.add_argument("--init-grid", action="store_true")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--contribs", help=".npy logits of shape (K+1, H, W)")
    src.add_argument("--synthetic-contribs", type=float, metavar="SIGMA")
    p.add_argument("--full-grid", action="store_true", help="use every pixel as a probe")
    p.add_argument("--out", required=True)
    p.add_argument("--max-iter", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-10)
    p.set_defaults(func=cmd_fit)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
    except (TpsMotionError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
