"""Command line entry point: ``suction-mpc <simulate|sweep|gradcheck>``.

Data goes to files under ``--out``; progress and errors go to stderr.
Exit codes: 0 success, 1 threshold or simulation failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .experiment import ConfigError, build_config, run_gradcheck, run_simulate, run_sweep
from .fluid import SimulationError

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _u64(text):
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit value")
    return v


def _positive(kind):
    def parse(text):
        try:
            v = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
        if not v > 0:
            raise argparse.ArgumentTypeError("must be > 0")
        return v
    return parse


def _add_run_flags(p):
    src = p.add_mutually_exclusive_group()
    src.add_argument("--preset", choices=("case1", "case2"), help="built-in scene (default case1)")
    src.add_argument("--scene", metavar="PATH", help="scene YAML file (see docs/scene-config.md)")
    p.add_argument("--seed", type=_u64, default=None, help="unsigned 64-bit seed (default 0)")
    p.add_argument("--steps", type=int, default=None,
                   help="total steps including warm-up (default warm-up + 1000)")
    p.add_argument("--out", metavar="DIR", default=None, help="output directory (default ./results)")
    p.add_argument("--config", metavar="PATH", help="YAML experiment config; its values override flags")
    p.add_argument("--desk", action="store_true",
                   help="desk scale: cap the scene at 600 particles and 2 particles/step")
    p.add_argument("-q", "--quiet", action="store_true", help="no progress output")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="suction-mpc",
        description="Differentiable fluid simulation and MPC of a suction nozzle.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="<simulate|sweep|gradcheck>")

    sim = sub.add_parser("simulate", help="run one policy and write curve, result and trajectory files",
                         description="Warm up the scene, run one policy and write "
                                     "<policy>_seed<seed>_{curve.csv,result.json,trajectory.csv}.")
    _add_run_flags(sim)
    sim.add_argument("--policy", metavar="SPEC", default=None,
                     help="mpc (default), fixed_emission, fixed_end, fixed_middle or end_to_emit; "
                          "append :K to pick flow path K, e.g. fixed_end:1")

    sw = sub.add_parser("sweep", help="MPC once per emission point along the cavity walls",
                        description="Run MPC for emission points spaced along the cavity walls and "
                                    "write sweep.csv plus one trajectory file per point.")
    _add_run_flags(sw)
    sw.add_argument("--spacing", type=_positive(float), default=4.0, help="distance between points in cm")

    gc = sub.add_parser("gradcheck", help="compare adjoint and finite-difference gradients on a toy scene",
                        description="Exit 0 when the max relative error is within the threshold, else 1.")
    gc.add_argument("--seed", type=_u64, default=None, help="toy problem seed (default 0)")
    gc.add_argument("--out", metavar="DIR", default=None, help="output directory (default ./results)")
    gc.add_argument("--config", metavar="PATH",
                    help="YAML with any of seed, out, delta, threshold, particles, horizon")
    gc.add_argument("--delta", type=_positive(float), default=None, help="finite-difference step in cm (1e-4)")
    gc.add_argument("--threshold", type=_positive(float), default=None, help="max relative error (1e-3)")
    gc.add_argument("--particles", type=int, default=None, help="particle count, 1..200 (random 50-100)")
    gc.add_argument("--horizon", type=int, default=None, help="rollout length, 1..5 (random 3-5)")
    gc.add_argument("--corrupt-adjoint", action="store_true",
                    help="test hook: flip one adjoint component so the check must fail")
    gc.add_argument("-q", "--quiet", action="store_true", help="no progress output")
    return parser


def _progress(quiet):
    if quiet:
        return None

    def emit(msg):
        print(msg, file=sys.stderr, flush=True)
    return emit


def _error(kind, message, code):
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def _run_config(args):
    return build_config(
        preset_name=args.preset, scene_path=args.scene, policy=getattr(args, "policy", None), seed=args.seed,
        steps=args.steps, out=args.out, config_path=args.config, desk=True if args.desk else None)


def cmd_simulate(args):
    cfg = _run_config(args)
    say = _progress(args.quiet)
    if say:
        say(f"simulate {cfg.policy.label} seed {cfg.seed} on {cfg.scene_source}, {cfg.total_steps} steps")
    result, files = run_simulate(cfg, say)
    if say:
        tau = result.tau90 if result.tau90 is not None else "not reached"
        say(f"residual {result.residual:.4f}, tau90 {tau}; wrote {', '.join(str(p) for p in files.values())}")
    return EXIT_OK


def cmd_sweep(args):
    cfg = _run_config(args)
    say = _progress(args.quiet)
    rows, _ = run_sweep(cfg, args.spacing, say)
    if say:
        say(f"wrote {Path(cfg.out) / 'sweep.csv'} ({len(rows)} points)")
    return EXIT_OK


GRADCHECK_KEYS = {"seed", "out", "delta", "threshold", "particles", "horizon"}


def cmd_gradcheck(args):
    opts = {"seed": args.seed, "out": args.out, "delta": args.delta, "threshold": args.threshold,
            "particles": args.particles, "horizon": args.horizon}
    if args.config:
        try:
            data = yaml.safe_load(Path(args.config).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(data, dict) or set(data) - GRADCHECK_KEYS:
            raise ConfigError(f"gradcheck config accepts only {', '.join(sorted(GRADCHECK_KEYS))}")
        opts.update({k: v for k, v in data.items() if v is not None})
    seed = int(opts["seed"] or 0)
    if opts["particles"] is not None and not 1 <= int(opts["particles"]) <= 200:
        raise ConfigError("particles must be in 1..200")
    if opts["horizon"] is not None and not 1 <= int(opts["horizon"]) <= 5:
        raise ConfigError("horizon must be in 1..5")
    say = _progress(args.quiet)
    report = run_gradcheck(seed, delta=float(opts["delta"] or 1e-4), threshold=float(opts["threshold"] or 1e-3),
                           corrupt=args.corrupt_adjoint, n_particles=opts["particles"], horizon=opts["horizon"])
    doc = json.loads(report.to_json())
    doc["seed"] = seed
    out = Path(opts["out"] or "results")
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"gradcheck_seed{seed}.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    step_, axis = report.worst
    summary = (f"max relative error {report.max_relative_error:.3e} at step {step_} axis {'xyz'[axis]} "
               f"(threshold {report.threshold:g}); wrote {path}")
    if report.passed:
        if say:
            say("gradcheck passed: " + summary)
        return EXIT_OK
    print("gradcheck FAILED: " + summary, file=sys.stderr)
    return EXIT_FAIL


COMMANDS = {"simulate": cmd_simulate, "sweep": cmd_sweep, "gradcheck": cmd_gradcheck}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        return _error("config", str(exc), EXIT_USAGE)
    except SimulationError as exc:
        return _error("simulation", str(exc), EXIT_FAIL)


if __name__ == "__main__":
    sys.exit(main())
