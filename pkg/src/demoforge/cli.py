"""Command line interface.

Exit codes: 0 success, 2 validation failure, 3 generation finished below
``min_success_rate``.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .config import DEFAULTS_TOML, load_task_config
from .errors import DemoForgeError

logger = logging.getLogger("demoforge")

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_LOW_SUCCESS = 3


def _load(path):
    try:
        return load_task_config(path)
    except DemoForgeError as exc:
        print(f"invalid task {path}: [{exc.reason}] {exc}", file=sys.stderr)
        return None


def cmd_validate(args):
    if args.print_defaults:
        sys.stdout.write(DEFAULTS_TOML)
        return EXIT_OK
    if not args.task:
        print("validate: a task file is required unless --print-defaults is given", file=sys.stderr)
        return EXIT_INVALID
    spec = _load(args.task)
    if spec is None:
        return EXIT_INVALID
    for w in spec.model.warnings:
        logger.warning("urdf: %s", w)
    if args.resolved:
        print(json.dumps(spec.resolved, indent=1, sort_keys=True, default=str))
    else:
        print(f"ok: task {spec.name!r} ({spec.goal}), robot {spec.model.name!r} with {spec.model.n_dof} joints, "
              f"{len(spec.arms)} arm(s), {len(spec.assets)} asset(s)")
    return EXIT_OK


def _overrides(spec, args):
    kw = {}
    if getattr(args, "n", None) is not None:
        kw["n_demos"] = args.n
    if getattr(args, "seed", None) is not None:
        kw["seed"] = args.seed
    if getattr(args, "no_interp", False):
        kw["interpolate"] = False
    return spec.with_overrides(**kw) if kw else spec


def cmd_generate(args):
    from .pipeline import generate_batch

    spec = _load(args.task)
    if spec is None:
        return EXIT_INVALID
    spec = _overrides(spec, args)
    try:
        stats = generate_batch(spec, args.out, workers=args.workers, only_success=args.only_success)
    except OSError as exc:
        print(f"cannot write dataset to {args.out}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    print(json.dumps(stats.to_dict(), indent=1))
    if stats.success_rate < spec.min_success_rate:
        print(f"success rate {stats.success_rate:.3f} below floor {spec.min_success_rate}", file=sys.stderr)
        return EXIT_LOW_SUCCESS
    return EXIT_OK


def cmd_grasps(args):
    from .grasp import sample_antipodal
    from .pipeline import _context
    from .randomize import make_rng

    spec = _load(args.task)
    if spec is None:
        return EXIT_INVALID
    ctx = _context(spec)
    rng = make_rng(spec.seed)
    for arm, pid in ctx.arm_part.items():
        surface = ctx.surfaces[pid]
        start = ctx.demos[pid].start
        hint = start.rotation.T @ spec.grasp.approach_dir
        g = spec.grasp
        cands = sample_antipodal(surface, spec.gripper, g.mu, g.n_samples, rng, approach_hint=hint)
        print(f"arm {arm}: part {pid!r}, {len(surface)} surface points, {len(cands)} antipodal candidates")
        for k, c in enumerate(cands[:args.top]):
            a1, a2 = c.contact_angles()
            print(f"  #{k:<3d} quality={c.quality:.3f} width={c.width * 1000:.1f} mm "
                  f"cone angles=({math.degrees(a1):.1f}, {math.degrees(a2):.1f}) deg "
                  f"c1={np.round(c.c1, 4).tolist()} c2={np.round(c.c2, 4).tolist()}")
    return EXIT_OK


def cmd_bench(args):
    import tempfile

    from .pipeline import generate_batch

    spec = _load(args.task)
    if spec is None:
        return EXIT_INVALID
    spec = _overrides(spec, args)
    rows = []
    for w in [int(v) for v in args.workers.split(",")]:
        with tempfile.TemporaryDirectory() as tmp:
            stats = generate_batch(spec, tmp, workers=w)
        rows.append((w, stats))
        print(f"workers={w:<3d} succeeded={stats.succeeded:<5d} wall={stats.wall_time:8.2f} s "
              f"rate={stats.demos_per_min:8.1f} demos/min")
    base = rows[0][1].demos_per_min
    for w, stats in rows[1:]:
        if base > 0:
            print(f"speedup x{w}: {stats.demos_per_min / base:.2f}")
    return EXIT_OK


def cmd_example(args):
    from .samples import write_task

    path = write_task(args.kind, Path(args.dir), n_demos=args.n)
    print(path)
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="demoforge", description="Synthesize robot demonstrations from one tracked demo.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="check a task file")
    v.add_argument("task", nargs="?")
    v.add_argument("--print-defaults", action="store_true", help="print every config key with its default")
    v.add_argument("--resolved", action="store_true", help="print the default-filled configuration")
    v.set_defaults(func=cmd_validate)

    g = sub.add_parser("generate", help="generate a dataset")
    g.add_argument("task")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int)
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--seed", type=int)
    g.add_argument("--no-interp", action="store_true", help="replay the demo object track without retargeting")
    g.add_argument("--only-success", action="store_true", help="do not write failure records")
    g.set_defaults(func=cmd_generate)

    k = sub.add_parser("grasps", help="list antipodal grasp candidates")
    k.add_argument("task")
    k.add_argument("--top", type=int, default=10)
    k.set_defaults(func=cmd_grasps)

    b = sub.add_parser("bench", help="throughput for several worker counts")
    b.add_argument("task")
    b.add_argument("--workers", default="1,2,4")
    b.add_argument("--n", type=int)
    b.add_argument("--seed", type=int)
    b.set_defaults(func=cmd_bench)

    e = sub.add_parser("example", help="write a sample task directory")
    e.add_argument("kind", choices=("tiger", "mug", "package", "drawer"))
    e.add_argument("dir")
    e.add_argument("--n", type=int, default=100)
    e.set_defaults(func=cmd_example)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if isinstance(getattr(args, "workers", None), int) and args.workers < 1:
        print("--workers must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
