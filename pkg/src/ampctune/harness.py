"""Batch tuning study: random plant instances, per-instance tuning, aggregates.

For every (seed, instance, method) triple the harness draws a ground-truth
parameter vector from the configured box, tunes the adaptive policy's
parameter input against closed-loop episode reward on that plant, and writes:

* one history CSV per run, columns
  ``episode,theta_1,...,theta_d,reward,incumbent_reward``;
* one aggregate CSV per (method, seed), columns ``epoch,mean,min,max`` of the
  incumbent reward across instances;
* ``summary.json`` with the episode-1 mean (``mean_initial``), final
  incumbent means, and the separately-evaluated final incumbents (mean of
  ``eval_episodes`` jittered episodes at the best parameters found).

Everything is derived from the experiment seeds alone, so reruns reproduce
the output files byte for byte regardless of worker count.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tuner
from .plant import N_PARAM, PARAM_HALFWIDTHS, CartpoleParams
from .policy import AdaptivePolicy
from .simloop import EpisodeConfig, rollout

MAX_SAMPLE_RETRIES = 100
METHODS = ("turbo", "sobol")


class InvariantUnsatisfiable(RuntimeError):
    """No physically valid parameter vector found within the retry budget."""


def _default_theta_nom() -> np.ndarray:
    return CartpoleParams().as_array()


@dataclass(frozen=True)
class ExperimentConfig:
    """Study shape: instance count, episode budget, methods, seeds, bounds."""

    bundle_dir: str
    out_dir: str
    n_instances: int = 20
    n_episodes: int = 18
    methods: tuple = METHODS
    seeds: tuple = (0, 1, 2)
    theta_nom: np.ndarray = field(default_factory=_default_theta_nom)
    halfwidths: np.ndarray = field(default_factory=lambda: PARAM_HALFWIDTHS.copy())
    init_jitter: float = 0.05
    eval_episodes: int = 3
    n_candidates: int | None = None
    workers: int | None = None
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)

    def __post_init__(self):
        object.__setattr__(self, "theta_nom",
                           np.asarray(self.theta_nom, dtype=float))
        object.__setattr__(self, "halfwidths",
                           np.asarray(self.halfwidths, dtype=float))
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.n_instances < 1:
            raise ValueError(f"n_instances must be >= 1, got {self.n_instances}")
        if self.n_episodes < 2:
            raise ValueError(f"n_episodes must be >= 2, got {self.n_episodes}")
        if not self.methods or any(m not in METHODS for m in self.methods):
            raise ValueError(f"methods must be a non-empty subset of {METHODS}")
        if len(set(self.methods)) != len(self.methods):
            raise ValueError("methods must not repeat")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be non-empty and unique")
        if self.theta_nom.shape != (N_PARAM,) or not np.all(np.isfinite(self.theta_nom)):
            raise ValueError(f"theta_nom must be {N_PARAM} finite values")
        if self.halfwidths.shape != (N_PARAM,):
            raise ValueError(f"halfwidths must have {N_PARAM} entries")
        if not np.all(np.isfinite(self.halfwidths)) or np.any(self.halfwidths < 0):
            raise ValueError("halfwidths must be finite and >= 0")
        if self.init_jitter < 0:
            raise ValueError("init_jitter must be >= 0")
        if self.eval_episodes < 1:
            raise ValueError("eval_episodes must be >= 1")
        if self.n_candidates is not None and self.n_candidates < 1:
            raise ValueError("n_candidates must be >= 1 when given")
        if self.workers is not None and self.workers < 1:
            raise ValueError("workers must be >= 1 when given")

    @property
    def lower(self) -> np.ndarray:
        return self.theta_nom - self.halfwidths

    @property
    def upper(self) -> np.ndarray:
        return self.theta_nom + self.halfwidths


def sample_instance(theta_nom: np.ndarray, halfwidths: np.ndarray,
                    seed) -> np.ndarray:
    """Draw ground-truth plant parameters uniformly from the bounded box.

    Each dimension is an independent uniform draw from
    [theta_nom - halfwidth, theta_nom + halfwidth].  Draws that violate the
    plant's physical invariants (non-positive masses etc.) are rejected and
    redrawn; after MAX_SAMPLE_RETRIES rejections the box is deemed
    unsatisfiable.  Zero-width boxes return theta_nom exactly.
    """
    theta_nom = np.asarray(theta_nom, dtype=float)
    halfwidths = np.asarray(halfwidths, dtype=float)
    if theta_nom.shape != (N_PARAM,) or halfwidths.shape != (N_PARAM,):
        raise ValueError(f"theta_nom and halfwidths must each have {N_PARAM} entries")
    if not (np.all(np.isfinite(theta_nom)) and np.all(np.isfinite(halfwidths))):
        raise ValueError("theta_nom and halfwidths must be finite")
    if np.any(halfwidths < 0):
        raise ValueError("halfwidths must be >= 0")
    rng = np.random.default_rng(seed)
    for _ in range(MAX_SAMPLE_RETRIES):
        theta = theta_nom + rng.uniform(-halfwidths, halfwidths)
        try:
            CartpoleParams.from_array(theta).validate()
        except ValueError:
            continue
        return theta
    raise InvariantUnsatisfiable(
        f"no valid plant parameters in the box after {MAX_SAMPLE_RETRIES} draws")


# Fixed stream tags keep instance draws, tuning runs, and final evaluations
# on disjoint seed sequences derived from (experiment seed, instance index).
_TAG_INSTANCE = 17
_TAG_BO = 29
_TAG_EVAL = 41


def derive_instance_seed(exp_seed: int, idx: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([exp_seed, _TAG_INSTANCE, idx])


def derive_bo_seed(exp_seed: int, idx: int) -> int:
    return int(np.random.SeedSequence([exp_seed, _TAG_BO, idx]).generate_state(1)[0])


def derive_eval_seed(exp_seed: int, idx: int, k: int) -> int:
    return int(np.random.SeedSequence([exp_seed, _TAG_EVAL, idx, k]).generate_state(1)[0])


@dataclass(frozen=True)
class RunResult:
    """One tuning run plus the separate final-incumbent evaluation."""

    method: str
    exp_seed: int
    instance_index: int
    theta_true: np.ndarray
    result: tuner.TuningResult
    final_eval_rewards: tuple
    final_eval_mean: float


def _run_single(cfg: ExperimentConfig, method: str, exp_seed: int,
                idx: int) -> RunResult:
    """Tune one instance with one method; runs inside a worker process."""
    pol = AdaptivePolicy.load(cfg.bundle_dir)
    theta_true = sample_instance(cfg.theta_nom, cfg.halfwidths,
                                 derive_instance_seed(exp_seed, idx))
    ep_cfg = replace(cfg.episode, theta_true=theta_true,
                     init_jitter=cfg.init_jitter)

    def objective(theta: np.ndarray, ep_seed: int) -> float:
        return rollout(pol, theta, ep_cfg, seed=ep_seed).reward

    bo_seed = derive_bo_seed(exp_seed, idx)
    if method == "turbo":
        result = tuner.run_bo(objective, cfg.theta_nom, cfg.lower, cfg.upper,
                              cfg.n_episodes, bo_seed,
                              n_candidates=cfg.n_candidates)
    elif method == "sobol":
        result = tuner.run_sobol_baseline(objective, cfg.theta_nom, cfg.lower,
                                          cfg.upper, cfg.n_episodes, bo_seed)
    else:
        raise ValueError(f"unknown method {method!r}")

    evals = tuple(
        rollout(pol, result.best_theta, ep_cfg,
                seed=derive_eval_seed(exp_seed, idx, k)).reward
        for k in range(cfg.eval_episodes))
    return RunResult(method=method, exp_seed=exp_seed, instance_index=idx,
                     theta_true=theta_true, result=result,
                     final_eval_rewards=evals,
                     final_eval_mean=float(np.mean(evals)))


def _run_single_star(args) -> RunResult:
    return _run_single(*args)


def history_header(d: int = N_PARAM) -> str:
    thetas = ",".join(f"theta_{j + 1}" for j in range(d))
    return f"episode,{thetas},reward,incumbent_reward"


def run_name(method: str, exp_seed: int, idx: int) -> str:
    return f"{method}_seed{exp_seed}_inst{idx:03d}"


def write_history_csv(path, result: tuner.TuningResult) -> None:
    """Per-run trace: raw reward and running incumbent for every episode."""
    lines = [history_header(result.records[0].theta.shape[0])]
    for rec, inc in zip(result.records, result.incumbent_rewards):
        thetas = ",".join(repr(float(v)) for v in rec.theta)
        lines.append(f"{rec.episode},{thetas},{repr(float(rec.reward))},"
                     f"{repr(float(inc))}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8",
                          newline="\n")


def write_aggregate_csv(path, incumbents: np.ndarray) -> None:
    """Across-instance stats per epoch; rows are epoch,mean,min,max."""
    incumbents = np.asarray(incumbents, dtype=float)
    lines = ["epoch,mean,min,max"]
    for e in range(incumbents.shape[1]):
        col = incumbents[:, e]
        lines.append(f"{e + 1},{repr(float(col.mean()))},"
                     f"{repr(float(col.min()))},{repr(float(col.max()))}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8",
                          newline="\n")


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Run the full study and write CSVs + summary.json under cfg.out_dir.

    Returns a manifest dict (also the content of summary.json) keyed by
    method and seed, holding mean_initial, the final mean incumbent, and the
    jitter-averaged final evaluations.
    """
    bundle = Path(cfg.bundle_dir)
    if not bundle.is_dir():
        raise FileNotFoundError(f"policy bundle directory not found: {bundle}")
    AdaptivePolicy.load(bundle)  # fail fast before spinning up workers

    out = Path(cfg.out_dir)
    runs_dir = out / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)

    tasks = [(cfg, method, exp_seed, idx)
             for exp_seed in cfg.seeds
             for method in cfg.methods
             for idx in range(cfg.n_instances)]
    n_workers = cfg.workers if cfg.workers is not None else (os.cpu_count() or 1)
    if n_workers <= 1 or len(tasks) == 1:
        results = [_run_single_star(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_run_single_star, tasks, chunksize=1))
    by_key = {(r.method, r.exp_seed, r.instance_index): r for r in results}

    summary: dict = {
        "n_instances": cfg.n_instances,
        "n_episodes": cfg.n_episodes,
        "eval_episodes": cfg.eval_episodes,
        "methods": list(cfg.methods),
        "seeds": list(cfg.seeds),
        "runs": {},
    }
    for method in cfg.methods:
        summary["runs"][method] = {}
        for exp_seed in cfg.seeds:
            rows = []
            for idx in range(cfg.n_instances):
                run = by_key[(method, exp_seed, idx)]
                write_history_csv(runs_dir / f"{run_name(method, exp_seed, idx)}.csv",
                                  run.result)
                rows.append(run)
            incumbents = np.array([r.result.incumbent_rewards for r in rows])
            write_aggregate_csv(out / f"aggregate_{method}_seed{exp_seed}.csv",
                                incumbents)
            initial = np.array([r.result.records[0].reward for r in rows])
            summary["runs"][method][str(exp_seed)] = {
                "mean_initial": float(initial.mean()),
                "mean_final_incumbent": float(incumbents[:, -1].mean()),
                "final_eval_mean": float(np.mean([r.final_eval_mean for r in rows])),
                "final_eval_per_instance": [r.final_eval_mean for r in rows],
                "theta_true": [[float(v) for v in r.theta_true] for r in rows],
                "best_theta": [[float(v) for v in r.result.best_theta]
                               for r in rows],
            }
    (out / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n",
        encoding="utf-8", newline="\n")
    return summary
