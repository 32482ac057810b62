"""Command-line driver: simulate scenes and audit written frames.

All physical parameters live in the scene file so the file is the whole
experiment; the command line only carries execution knobs.
"""
from __future__ import annotations

import argparse
import sys

from .scene import audit_intersections, load_scene, run


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="stiffbody",
        description="Intersection-free stiff-body dynamics",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="advance a scene and write frames")
    sim.add_argument("scene", help="scene JSON file")
    sim.add_argument("--steps", type=int, default=100, help="number of time steps")
    sim.add_argument("--out", default=None, help="output directory")
    sim.add_argument("--workers", type=int, default=None,
                     help="override the scene's worker count")
    sim.add_argument("--strict", action="store_true",
                     help="exit nonzero if any step fails to converge")
    sim.add_argument("--audit", action="store_true",
                     help="run the intersection audit on the written frames")
    sim.add_argument("--quiet", action="store_true")

    aud = sub.add_parser("audit", help="audit frames in a directory")
    aud.add_argument("directory")

    args = parser.parse_args(argv)

    if args.command == "audit":
        violations = audit_intersections(args.directory)
        if violations:
            for frame, a, b in violations:
                print(f"INTERSECTION {frame}: {a} x {b}")
            print(f"{len(violations)} violation(s)")
            return 1
        print("audit clean: no inter-body intersections")
        return 0

    scene = load_scene(args.scene)
    if args.workers is not None:
        scene.params.workers = args.workers

    def progress(step, fs):
        if not args.quiet and (step % 50 == 0 or not fs.converged):
            flag = "" if fs.converged else "  [not converged]"
            print(
                f"step {fs.step:6d}  iters {fs.iterations:3d}  "
                f"min_dist {fs.min_distance:.3e}  pairs {fs.candidates:5d}{flag}"
            )

    stats, violations, nonconverged = run(
        scene,
        args.steps,
        out_dir=args.out,
        audit=args.audit or None,
        progress=progress,
    )
    if not args.quiet:
        if stats:
            mean_iters = sum(s.iterations for s in stats) / len(stats)
            print(f"{len(stats)} step(s), mean Newton iterations {mean_iters:.2f}")
        if args.audit:
            print(
                "audit clean" if not violations
                else f"audit found {len(violations)} violation(s)"
            )
    if violations:
        return 2
    if args.strict and nonconverged:
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
