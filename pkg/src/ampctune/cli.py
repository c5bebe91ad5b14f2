"""Command-line tools: dataset synthesis, training, evaluation, tuning, study.

Subcommands
-----------
gen-dataset  solve the sampled-state control problems and store the records
train        fit the action and sensitivity networks, save a policy bundle
eval         roll out the policy in closed loop, write traces + figure
tune         adapt the policy's parameter input on one plant instance
experiment   batch study over random instances, both tuning methods

Every subcommand accepts ``--config path.toml`` (see :mod:`ampctune.config`)
and ``--seed``.  All outputs are derived from those two alone, so a rerun
with the same arguments reproduces the output files byte for byte.

Exit codes: 0 success, 2 bad usage or config, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import harness, report, tuner
from .config import ConfigError, load_config
from .dataset import DatasetFile, StateSamplingBox, generate
from .net import TrainConfig
from .plant import N_PARAM, PARAM_HALFWIDTHS, CartpoleParams
from .policy import AdaptivePolicy
from .simloop import rollout


def _theta_arg(text: str) -> np.ndarray:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected comma-separated numbers, got {text!r}")
    if len(vals) != N_PARAM:
        raise argparse.ArgumentTypeError(
            f"expected {N_PARAM} comma-separated values, got {len(vals)}")
    arr = np.array(vals)
    if not np.all(np.isfinite(arr)):
        raise argparse.ArgumentTypeError("parameter values must be finite")
    return arr


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8", newline="\n")


def _rollout_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, 3, k]).generate_state(1)[0])


def cmd_gen_dataset(args, cfg) -> int:
    box = StateSamplingBox(lower=np.asarray(cfg.dataset.box_lower, dtype=float),
                           upper=np.asarray(cfg.dataset.box_upper, dtype=float))
    n = args.n if args.n is not None else cfg.dataset.n_samples
    workers = args.workers if args.workers is not None else cfg.dataset.workers
    ds = generate(n, box, CartpoleParams(), cfg.mpc, seed=args.seed,
                  n_workers=workers)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ds.save(out)
    print(f"wrote {ds.n} records to {out}")
    return 0


def cmd_train(args, cfg) -> int:
    data = DatasetFile.load(args.dataset)
    t = cfg.train
    action_cfg = TrainConfig(learning_rate=t.learning_rate,
                             batch_size=t.batch_size, epochs=t.epochs,
                             val_fraction=t.val_fraction, seed=args.seed,
                             lr_schedule=t.lr_schedule,
                             mirror_augment=t.mirror_augment)
    sens_cfg = TrainConfig(learning_rate=t.learning_rate,
                           batch_size=t.batch_size, epochs=t.epochs,
                           val_fraction=t.val_fraction, seed=args.seed + 1,
                           lr_schedule=t.lr_schedule,
                           mirror_augment=t.mirror_augment)
    pol, summary = AdaptivePolicy.train_from_dataset(
        data, CartpoleParams().as_array(), cfg.mpc.constants.u_max,
        action_cfg=action_cfg, sens_cfg=sens_cfg,
        action_hidden=t.action_hidden, sens_hidden=t.sens_hidden)
    out = Path(args.out)
    pol.save(out)
    _write_json(out / "training_summary.json", summary)
    print(f"saved policy bundle to {out} "
          f"(action val RMSE {summary['action']['val_rmse']:.4g}, "
          f"sensitivity val RMSE {summary['sensitivity']['val_rmse']:.4g})")
    return 0


def cmd_eval(args, cfg) -> int:
    pol = AdaptivePolicy.load(args.bundle)
    theta = args.theta if args.theta is not None else pol.theta_nom
    theta_true = (args.theta_true if args.theta_true is not None
                  else CartpoleParams().as_array())
    ep_cfg = cfg.episode.to_episode_config(theta_true=theta_true,
                                           init_jitter=args.jitter)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = ["episode,reward,failed,fail_reason"]
    rewards = []
    for k in range(args.episodes):
        rec = rollout(pol, theta, ep_cfg, seed=_rollout_seed(args.seed, k))
        rec.export_csv(out / f"episode_{k:02d}.csv")
        if k == 0:
            report.episode_figure(rec, out / "episode_00.png")
        rewards.append(rec.reward)
        rows.append(f"{k},{repr(float(rec.reward))},{int(rec.failed)},"
                    f"{rec.fail_reason or ''}")
    (out / "rewards.csv").write_text("\n".join(rows) + "\n",
                                     encoding="utf-8", newline="\n")
    print(f"mean reward over {args.episodes} episode(s): "
          f"{float(np.mean(rewards)):.6f}")
    return 0


def cmd_tune(args, cfg) -> int:
    pol = AdaptivePolicy.load(args.bundle)
    method = args.method if args.method is not None else cfg.tune.method
    episodes = args.episodes if args.episodes is not None else cfg.tune.episodes
    theta_nom = pol.theta_nom
    halfwidths = PARAM_HALFWIDTHS
    lower, upper = theta_nom - halfwidths, theta_nom + halfwidths
    if args.theta_true is not None:
        theta_true = args.theta_true
    else:
        theta_true = harness.sample_instance(
            theta_nom, halfwidths, harness.derive_instance_seed(args.seed, 0))
    ep_cfg = cfg.episode.to_episode_config(theta_true=theta_true,
                                           init_jitter=cfg.tune.init_jitter)

    def objective(theta: np.ndarray, ep_seed: int) -> float:
        return rollout(pol, theta, ep_cfg, seed=ep_seed).reward

    bo_seed = harness.derive_bo_seed(args.seed, 0)
    if method == "turbo":
        result = tuner.run_bo(objective, theta_nom, lower, upper, episodes,
                              bo_seed, n_candidates=cfg.tune.n_candidates)
    else:
        result = tuner.run_sobol_baseline(objective, theta_nom, lower, upper,
                                          episodes, bo_seed)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    harness.write_history_csv(out / "history.csv", result)
    report.incumbent_figure({method: result.incumbent_rewards},
                            out / "incumbent.png")
    evals = [rollout(pol, result.best_theta, ep_cfg,
                     seed=harness.derive_eval_seed(args.seed, 0, k)).reward
             for k in range(cfg.tune.eval_episodes)]
    _write_json(out / "tune_summary.json", {
        "method": method,
        "episodes": episodes,
        "theta_true": [float(v) for v in theta_true],
        "best_theta": [float(v) for v in result.best_theta],
        "best_reward": float(result.best_reward),
        "final_eval_rewards": [float(r) for r in evals],
        "final_eval_mean": float(np.mean(evals)),
    })
    print(f"{method}: best tuning reward {result.best_reward:.6f}, "
          f"final evaluation {float(np.mean(evals)):.6f} "
          f"(mean of {cfg.tune.eval_episodes})")
    return 0


def cmd_experiment(args, cfg) -> int:
    e = cfg.experiment
    ec = harness.ExperimentConfig(
        bundle_dir=args.bundle,
        out_dir=args.out,
        n_instances=args.instances if args.instances is not None else e.n_instances,
        n_episodes=args.episodes if args.episodes is not None else e.episodes,
        methods=e.methods,
        seeds=e.seeds,
        init_jitter=e.init_jitter,
        eval_episodes=e.eval_episodes,
        n_candidates=e.n_candidates,
        workers=args.workers if args.workers is not None else e.workers,
        episode=cfg.episode.to_episode_config(),
    )
    summary = harness.run_experiment(ec)
    report.experiment_figure(args.out, ec.methods, ec.seeds,
                             Path(args.out) / "rewards.png")
    for method in ec.methods:
        for seed in ec.seeds:
            s = summary["runs"][method][str(seed)]
            print(f"{method} seed {seed}: mean initial {s['mean_initial']:.4f}"
                  f" -> mean final incumbent {s['mean_final_incumbent']:.4f}"
                  f" (final eval {s['final_eval_mean']:.4f})")
    print(f"wrote aggregates and summary.json to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="path.toml", default=None,
                        help="TOML run configuration (defaults when omitted)")
    common.add_argument("--seed", type=int, default=0,
                        help="master seed for this command (default 0)")

    p = argparse.ArgumentParser(
        prog="ampctune",
        description="Parameter-adaptive approximate MPC: imitation, "
                    "closed-loop evaluation, and reward-based auto-tuning.")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    g = sub.add_parser("gen-dataset", parents=[common],
                       help="solve sampled control problems into a dataset")
    g.add_argument("--out", required=True, help="output dataset file (.paad)")
    g.add_argument("--n", type=int, default=None,
                   help="number of records (overrides [dataset] n_samples)")
    g.add_argument("--workers", type=int, default=None,
                   help="parallel solver processes")
    g.set_defaults(func=cmd_gen_dataset)

    t = sub.add_parser("train", parents=[common],
                       help="fit both networks and save a policy bundle")
    t.add_argument("--dataset", required=True, help="input dataset file")
    t.add_argument("--out", required=True, help="output bundle directory")
    t.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", parents=[common],
                        help="closed-loop episodes with trace CSVs and figure")
    ev.add_argument("--bundle", required=True, help="policy bundle directory")
    ev.add_argument("--out", required=True, help="output directory")
    ev.add_argument("--theta", type=_theta_arg, default=None,
                    help="policy parameter input (default: bundle nominal)")
    ev.add_argument("--theta-true", type=_theta_arg, default=None,
                    help="true plant parameters (default: nominal)")
    ev.add_argument("--episodes", type=int, default=1,
                    help="number of episodes (default 1)")
    ev.add_argument("--jitter", type=float, default=0.0,
                    help="initial-angle jitter half-range [rad] (default 0)")
    ev.set_defaults(func=cmd_eval)

    tu = sub.add_parser("tune", parents=[common],
                        help="tune the parameter input on one plant instance")
    tu.add_argument("--bundle", required=True, help="policy bundle directory")
    tu.add_argument("--out", required=True, help="output directory")
    tu.add_argument("--method", choices=["turbo", "sobol"], default=None,
                    help="tuning method (overrides [tune] method)")
    tu.add_argument("--episodes", type=int, default=None,
                    help="tuning episodes (overrides [tune] episodes)")
    tu.add_argument("--theta-true", type=_theta_arg, default=None,
                    help="tune against this plant instead of sampling one")
    tu.set_defaults(func=cmd_tune)

    ex = sub.add_parser("experiment", parents=[common],
                        help="batch study over random plant instances")
    ex.add_argument("--bundle", required=True, help="policy bundle directory")
    ex.add_argument("--out", required=True, help="output directory")
    ex.add_argument("--instances", type=int, default=None,
                    help="instance count (overrides [experiment] n_instances)")
    ex.add_argument("--episodes", type=int, default=None,
                    help="episodes per run (overrides [experiment] episodes)")
    ex.add_argument("--workers", type=int, default=None,
                    help="parallel tuning processes")
    ex.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures -> exit 3, message on stderr
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":  # pragma: no cover - exercised via console script
    sys.exit(main())
