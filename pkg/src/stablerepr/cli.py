"""Command line: ``stablerepr {sweep,learnability,learn,analyze}``.

Exit codes: 0 success, 2 invalid input, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

from . import io as sio
from .errors import NumericalError, TrainingBlowUpError, ValidationError
from .experiments import (LEARNABILITY_COLUMNS, SWEEP_COLUMNS, XI_CHOICES, build_problem,
                          learnability, sweep)
from .learners import (TransitionBuffer, adam, krylov_config, schur_config, sgd,
                       train_krylov_predictive, train_schur_predictive)
from .linalg import subspace_distance
from .mdp import fourroom
from .representations import CATALOG, Method
from .stability import (analyze, epsilon_invariance, is_stable, iteration_matrix,
                        stability_report)

logger = logging.getLogger("stablerepr")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3


def _setup_logging():
    level = os.environ.get("STABLEREPR_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _methods(text: str) -> list[Method]:
    if text.strip().lower() == "all":
        return list(CATALOG)
    return [Method.parse(t.strip()) for t in text.split(",") if t.strip()]


def _seeds(text: str) -> list[int]:
    """``"5"`` means seeds 0..4; ``"3,7"`` lists seeds explicitly."""
    try:
        if "," in text:
            return [int(t) for t in text.split(",") if t.strip()]
        count = int(text)
    except ValueError as exc:
        raise ValidationError(f"bad --seeds value {text!r}") from exc
    if count < 1:
        raise ValidationError("--seeds must be positive")
    return list(range(count))


def _samples(text: str) -> list:
    out = []
    for t in text.split(","):
        t = t.strip()
        if not t:
            continue
        if t.lower() in ("exact", "inf"):
            out.append("exact")
            continue
        try:
            out.append(int(t))
        except ValueError as exc:
            raise ValidationError(f"bad --samples entry {t!r}") from exc
    if not out:
        raise ValidationError("--samples is empty")
    return out


def _problem(args, default_xi="empirical", seed=0):
    mdp = fourroom() if args.mdp == "fourroom" else sio.load_mdp(args.mdp)
    policy = sio.load_policy(args.policy, mdp.n_states, mdp.n_actions) if args.policy else None
    xi = args.xi or default_xi
    if xi not in XI_CHOICES:
        xi = sio.load_vector(xi, mdp.n)
    return build_problem(mdp, policy, xi, args.gamma, seed=seed)


def _out_path(out: str, default_name: str):
    if out == "-":
        return None
    path = Path(out)
    if path.suffix:
        path.parent.mkdir(parents=True, exist_ok=True)
        return path
    path.mkdir(parents=True, exist_ok=True)
    return path / default_name


def _write_rows(out, name, columns, rows):
    path = _out_path(out, name)
    if path is None:
        sio.write_table(sys.stdout, columns, rows)
    else:
        sio.write_table(path, columns, rows)
        print(path)


def cmd_sweep(args) -> int:
    seeds = _seeds(args.seeds)
    problem = _problem(args, seed=seeds[0])
    if args.d_min > args.d_max:
        raise ValidationError("--d-min exceeds --d-max")
    rows = sweep(problem, _methods(args.methods), range(args.d_min, args.d_max + 1), args.jobs)
    _write_rows(args.out, "sweep.csv", SWEEP_COLUMNS, rows)
    return EXIT_OK


def cmd_learnability(args) -> int:
    problem = _problem(args, default_xi="exact")
    if args.d_min > args.d_max:
        raise ValidationError("--d-min exceeds --d-max")
    rows = []
    for d in range(args.d_min, args.d_max + 1):
        rows.extend(learnability(problem, _methods(args.methods), d, _samples(args.samples),
                                 _seeds(args.seeds), args.jobs))
    _write_rows(args.out, "learnability.csv", LEARNABILITY_COLUMNS, rows)
    return EXIT_OK


def cmd_learn(args) -> int:
    seeds = _seeds(args.seeds)
    problem = _problem(args, seed=seeds[0])
    space, pm, gamma = problem.space, problem.pm, problem.gamma
    d = args.d if args.d is not None else (21 if args.variant == "schur" else 5)
    factory = problem.factory()
    common = dict(steps=args.steps, minibatch=args.minibatch, rng_seed=seeds[0],
                  full_batch=args.full_batch)
    out_dir = Path(args.out if args.out != "-" else ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.time()
    try:
        if args.variant == "schur":
            cfg = schur_config(optimizer=sgd(args.step_size or 4.0),
                               target_refresh_interval=args.refresh, **common)
            if args.targets == "exact":
                result = train_schur_predictive(pm, d, cfg, xi=problem.xi)
            else:
                buf = TransitionBuffer.from_trajectories(problem.buffer, problem.mdp.n_states,
                                                         problem.mdp.n_actions)
                result = train_schur_predictive(buf, d, cfg, policy=problem.policy,
                                                xi=problem.xi)
            reference = factory.build(Method.SCHUR, d)
        else:
            cfg = krylov_config(optimizer=adam(args.step_size or 1e-3), **common)
            if args.targets == "exact":
                result = train_krylov_predictive(pm, d, cfg, reward=problem.mdp.reward,
                                                 xi=problem.xi)
            else:
                buf = TransitionBuffer.from_trajectories(problem.buffer, problem.mdp.n_states,
                                                         problem.mdp.n_actions)
                result = train_krylov_predictive(buf, d, cfg, xi=problem.xi, mdp=problem.mdp,
                                                 policy=problem.policy)
            reference = factory.build(Method.ORTHOG_KRYLOV, d)
    except TrainingBlowUpError as exc:
        sio.write_table(out_dir / "loss.csv", ("step", "loss"),
                        [{"step": k, "loss": v} for k, v in exc.history])
        raise
    logger.info("training took %.1f s", time.time() - started)
    rep = result.rep
    report = stability_report(iteration_matrix(rep, pm, space, gamma))
    svd_sr = factory.build(Method.SVD_SR, d)
    analysis = {
        "variant": args.variant, "d": d, "effective_d": rep.effective_d,
        "steps": args.steps,
        "stable": report.stable, "min_real_part": report.min_real_part,
        "raw_parametrization_stable": is_stable(result.raw, pm, space, gamma),
        "epsilon_invariance": epsilon_invariance(rep, pm, space),
        "svd_sr_epsilon_invariance": epsilon_invariance(svd_sr, pm, space),
        "reference_method": reference.method.value,
        "subspace_distance_to_reference": subspace_distance(rep.phi, reference.phi, space),
        "rank": result.raw.provenance.get("rank"),
        "final_loss": float(result.losses[-1]) if result.losses.size else None,
        "xi_source": problem.xi_source,
    }
    result.write_checkpoint(out_dir / "checkpoint.json")
    result.write_loss_csv(out_dir / "loss.csv")
    sio.save_representation(out_dir / "representation.csv", result.raw)
    sio.dump_json(analysis, out_dir / "analysis.json")
    print(sio.dump_json(analysis))
    return EXIT_OK


def cmd_analyze(args) -> int:
    if args.fixture:
        base = sio.fixture_path(args.fixture)
        mdp_path, policy_path, rep_path = base / "mdp.json", base / "policy.json", \
            base / "representation.csv"
        xi_arg = args.xi or str(base / "xi.json")
    else:
        if not args.mdp or not args.rep:
            raise ValidationError("analyze needs --mdp and --rep (or --fixture)")
        mdp_path, policy_path, rep_path, xi_arg = args.mdp, args.policy, args.rep, args.xi
    mdp = fourroom() if str(mdp_path) == "fourroom" else sio.load_mdp(mdp_path)
    policy = sio.load_policy(policy_path, mdp.n_states, mdp.n_actions) if policy_path else None
    xi = xi_arg or "stationary"
    if xi not in XI_CHOICES:
        xi = sio.load_vector(xi, mdp.n)
    problem = build_problem(mdp, policy, xi, args.gamma)
    rep = sio.load_representation(rep_path, mdp.n)
    out = analyze(rep, problem.pm, problem.space, problem.gamma, mdp=problem.mdp)
    out["representation"] = str(rep_path)
    out["xi_source"] = problem.xi_source
    path = None if args.out == "-" else Path(args.out)
    text = sio.dump_json(out, path)
    if path is None:
        print(text)
    else:
        print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stablerepr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default="."):
        p.add_argument("--mdp", default="fourroom",
                       help="'fourroom' or a path to an MDP JSON file")
        p.add_argument("--policy", help="evaluated policy JSON (default: eps-greedy optimal)")
        p.add_argument("--xi", help=f"data distribution: one of {', '.join(XI_CHOICES)} or a "
                                    "vector file")
        p.add_argument("--gamma", type=float, help="discount (default: the MDP's)")
        p.add_argument("--seeds", default="1", help="N (seeds 0..N-1) or a comma list")
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--out", default=out_default, help="output directory, file, or '-'")

    p = sub.add_parser("sweep", help="stability and error of every (method, d) cell")
    common(p)
    p.add_argument("--methods", default="all")
    p.add_argument("--d-min", type=int, default=1)
    p.add_argument("--d-max", type=int, default=40)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("learnability", help="distance of sample-based to exact representations")
    common(p)
    p.set_defaults(seeds="5")
    p.add_argument("--methods", default="all")
    p.add_argument("--d-min", type=int, default=10)
    p.add_argument("--d-max", type=int, default=10)
    p.add_argument("--samples", default="500,5000,50000",
                   help="comma list of transition counts; 'exact' injects expected counts")
    p.set_defaults(func=cmd_learnability)

    p = sub.add_parser("learn", help="train a representation network and analyze it")
    common(p, out_default="learn_out")
    p.add_argument("variant", choices=("schur", "krylov"))
    p.add_argument("--d", type=int)
    p.add_argument("--steps", type=int, default=100_000)
    p.add_argument("--minibatch", type=int, default=32)
    p.add_argument("--step-size", type=float)
    p.add_argument("--refresh", type=int, default=10_000)
    p.add_argument("--targets", choices=("buffer", "exact"), default=None,
                   help="schur: 'buffer' (default) or 'exact' P; krylov: 'exact' (default) "
                        "or 'buffer' (Monte Carlo rollouts)")
    p.add_argument("--full-batch", action="store_true",
                   help="exact expectation over xi instead of minibatches")
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("analyze", help="full stability report of one representation")
    common(p, out_default="-")
    p.add_argument("--rep", help="representation CSV (with optional .json sidecar)")
    p.add_argument("--fixture", help="bundled example, e.g. 'tsitsiklis'")
    p.set_defaults(func=cmd_analyze, mdp=None)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "learn" and args.targets is None:
        args.targets = "buffer" if args.variant == "schur" else "exact"
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
