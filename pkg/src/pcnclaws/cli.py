"""Command-line entry point.

Subcommands: gen-data, train, simulate, estimate, eval, check-grad.
Flags are SI units (E in Pa, nu unitless, tau-y in Pa, theta-f in degrees).
Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import dataio, estimation, training
from .autodiff import rollout_with_tape
from .errors import PcnclawsError
from .laws import AnalyticLaw
from .materials import Material, PhysParams
from .mpm import Boundary, simulate
from .nn import DEFAULT_RANGES, make_neural_law

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("PCNCLAWS_THREADS")
    return int(env) if env else 1


def _params_from_args(args) -> PhysParams:
    material = Material(args.material)
    return PhysParams(material=material, youngs_modulus=args.E,
                      poisson_ratio=args.nu,
                      yield_stress=args.tau_y,
                      friction_angle=args.theta_f)


def _add_param_flags(p):
    p.add_argument("--material", required=True,
                   choices=[m.value for m in Material])
    p.add_argument("--E", type=float, required=True, help="Young's modulus, Pa")
    p.add_argument("--nu", type=float, required=True, help="Poisson's ratio")
    p.add_argument("--tau-y", dest="tau_y", type=float, default=None,
                   help="yield stress, Pa (plasticine)")
    p.add_argument("--theta-f", dest="theta_f", type=float, default=None,
                   help="friction angle, degrees (sand)")


def _add_scene_flags(p):
    p.add_argument("--dim", type=int, default=2, choices=(2, 3))
    p.add_argument("--particles", type=int, default=256)
    p.add_argument("--side", type=float, default=None, help="cube side, m")
    p.add_argument("--boundary", choices=[b.value for b in Boundary], default=None)


def _scene_spec(args, params, n_frames, name="scene"):
    boundary = Boundary(args.boundary) if args.boundary else None
    return dataio.drop_scene_spec(params.material, params, dim=args.dim,
                                  particle_count=args.particles,
                                  n_frames=n_frames, name=name,
                                  boundary=boundary, side=args.side)


def cmd_gen_data(args) -> int:
    with open(args.config, encoding="utf-8") as fh:
        cfg = json.load(fh)
    specs = [dataio.scenario_from_dict(d) for d in cfg["scenarios"]]
    manifest = dataio.generate_dataset(specs, args.out, threads=_threads(args))
    print(f"wrote {len(manifest['scenarios'])} trajectories to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    entries = dataio.load_manifest(args.data)
    dataset = training.scenarios_from_manifest(entries, split="train")
    if not dataset:
        raise PcnclawsError("manifest has no training scenarios")
    material = dataset[0].params.material
    dim = dataset[0].sim.dim
    law = make_neural_law(material, dim=dim, seed=args.seed)
    cfg = training.TrainConfig(window_len=args.window, batch_size=args.batch,
                               lr0=args.lr, lr_min=args.lr_min,
                               total_steps=args.steps, seed=args.seed)
    training.train(dataset, law, cfg)
    dataio.write_checkpoint(law, dim, args.out)
    print(f"checkpoint written to {args.out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    params = _params_from_args(args)
    if args.analytic:
        law = AnalyticLaw(params.material)
    else:
        if not args.ckpt:
            raise UsageError("simulate needs --ckpt or --analytic")
        law, dim = dataio.read_checkpoint(args.ckpt,
                                          expected_material=params.material)
        if dim != args.dim:
            raise PcnclawsError(f"checkpoint is {dim}D, scene is {args.dim}D")
    spec = _scene_spec(args, params, args.frames)
    state = dataio.build_initial_state(spec)
    traj = simulate(state, law, params, spec.sim, args.frames)
    dataio.write_trajectory(traj, args.out)
    print(f"trajectory with {traj.n_frames} frames written to {args.out}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    observed = dataio.read_trajectory(args.observed)
    init = _params_from_args(args)
    if args.analytic:
        law = AnalyticLaw(init.material)
    else:
        if not args.ckpt:
            raise UsageError("estimate needs --ckpt or --analytic")
        law, _ = dataio.read_checkpoint(args.ckpt,
                                        expected_material=init.material)
    spec = _scene_spec(args, init, 1)
    state = dataio.build_initial_state(spec)
    if observed.particle_count != state.count:
        raise PcnclawsError(
            f"observed trajectory has {observed.particle_count} particles, "
            f"scene flags give {state.count}")
    cfg = estimation.EstimateConfig(observe_len=args.observe,
                                    lr=args.lr, max_iters=args.iters,
                                    n_starts=args.starts, seed=args.seed)
    result = estimation.estimate_params(law, observed, init, spec.sim,
                                        state.mass, state.volume0, cfg)
    p = result.params
    line = f"estimated: E={p.youngs_modulus:.6g} nu={p.poisson_ratio:.6g}"
    if p.yield_stress is not None:
        line += f" tau_y={p.yield_stress:.6g}"
    if p.friction_angle is not None:
        line += f" theta_f={p.friction_angle:.6g}"
    print(line + f" loss={result.loss:.6g}")
    return EXIT_OK


def cmd_eval(args) -> int:
    pred = dataio.read_trajectory(args.pred)
    gt = dataio.read_trajectory(args.gt)
    blocks, mean = training.eval_metrics(pred, gt)
    for i, b in enumerate(blocks):
        print(f"block={i} frames={i * 5}..{min(i * 5 + 4, len(pred.positions) - 1)} "
              f"mse={b:.8g}")
    print(f"mean={mean:.8g}")
    return EXIT_OK


def cmd_check_grad(args) -> int:
    params = PhysParams(Material.ELASTICITY, 2e5, 0.2)
    spec = dataio.drop_scene_spec(Material.ELASTICITY, params, dim=2,
                                  particle_count=8, n_frames=5, name="tiny",
                                  side=0.05, gap=0.02)
    state = dataio.build_initial_state(spec)
    rng = np.random.default_rng(args.seed)
    state.F_e += 0.1 * rng.normal(size=state.F_e.shape)
    state.v += 0.5 * rng.normal(size=state.v.shape)
    law = make_neural_law(Material.ELASTICITY, dim=2, seed=args.seed)
    _, tape = rollout_with_tape(state.copy(), law, params, spec.sim, 5)
    bundle = tape.backward(2.0 * tape.positions64)
    worst = 0.0
    eps = 1e-6
    for li, g in zip((0, 2), (bundle.d_theta_e[0], bundle.d_theta_e[4])):
        idx = np.unravel_index(np.argmax(np.abs(g)), g.shape)
        vals = []
        for s in (+eps, -eps):
            import copy
            law2 = copy.deepcopy(law)
            law2.els.weights[li][idx] += s
            _, tp = rollout_with_tape(state.copy(), law2, params, spec.sim, 5)
            vals.append(float(np.sum(tp.positions64 ** 2)))
        fd = (vals[0] - vals[1]) / (2 * eps)
        worst = max(worst, abs(g[idx] - fd) / max(abs(fd), 1e-12))
    print(f"max_rel_err={worst:.3e}")
    return EXIT_OK if worst <= 1e-4 else EXIT_RUNTIME


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pcnclaws")
    ap.add_argument("--threads", type=int, default=None,
                    help="worker cap (or PCNCLAWS_THREADS)")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--deterministic", action="store_true",
                    help="accepted for compatibility; execution is always deterministic")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="simulate scenario configs to a dataset")
    p.add_argument("--config", required=True, help="scenario JSON file")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train the conditional networks")
    p.add_argument("--data", required=True, help="dataset manifest.json")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--window", type=int, default=10)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--lr-min", dest="lr_min", type=float, default=3e-5)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("simulate", help="roll out a trajectory")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--analytic", action="store_true")
    _add_param_flags(p)
    _add_scene_flags(p)
    p.add_argument("--frames", type=int, default=200)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("estimate", help="inverse parameter estimation")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--analytic", action="store_true")
    p.add_argument("--observed", required=True, help="observed trajectory file")
    _add_param_flags(p)
    _add_scene_flags(p)
    p.add_argument("--observe", type=int, default=None,
                   help="observation window, frames (default full)")
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--lr", type=float, default=5e-2)
    p.add_argument("--starts", type=int, default=1)
    p.set_defaults(fn=cmd_estimate)

    p = sub.add_parser("eval", help="per-5-frame MSE against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("check-grad", help="finite-difference gradient check")
    p.add_argument("--scene", default="tiny", choices=["tiny"])
    p.set_defaults(fn=cmd_check_grad)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PcnclawsError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
