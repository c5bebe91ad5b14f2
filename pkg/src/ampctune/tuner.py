"""Single-trust-region Bayesian optimization over plant parameters.

The loop keeps one anisotropic trust-region hyperbox centered at the
incumbent.  Each episode fits a GP to all rewards since the last restart,
draws one joint Thompson sample over a Sobol candidate set inside the box,
and evaluates the argmax.  Improvements grow the box, stalls shrink it,
and when it collapses below `TR_LENGTH_MIN` the search restarts at the
incumbent with fresh GP data.  A quasi-random Sobol sweep over the full
tuning box serves as the baseline method.

All box geometry lives in normalized coordinates: the tuning bounds map to
the unit cube, matching the GP's input convention.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import qmc

from . import gp

TR_LENGTH_INIT = 0.4
TR_LENGTH_MAX = 1.6
TR_LENGTH_MIN = 2.0**-7
SUCCESS_TOL = 3
FAIL_TOL = 3
#: Relative margin a reward must clear over the best to count as improvement.
IMPROVEMENT_REL = 1e-3
#: Evaluated points needed before the GP takes over from Sobol bootstrap.
MIN_GP_POINTS = 3


def default_n_candidates(d: int) -> int:
    return min(5000, 200 * d)


class BoundsError(ValueError):
    """Tuning bounds are malformed."""


def _check_bounds(lower: np.ndarray, upper: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if lower.ndim != 1 or lower.shape != upper.shape:
        raise BoundsError("bounds must be two equal-length vectors")
    if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
        raise BoundsError("bounds must be finite")
    if not np.all(upper > lower):
        raise BoundsError("every upper bound must exceed its lower bound")
    return lower, upper


def normalize(theta: np.ndarray, lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    return (np.asarray(theta, dtype=float) - lower) / (upper - lower)


def denormalize(z: np.ndarray, lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    return lower + np.asarray(z, dtype=float) * (upper - lower)


def sobol_points(d: int, n: int, skip: int = 1) -> np.ndarray:
    """First n points of the unscrambled d-dimensional Sobol sequence.

    The stream starts at index `skip` (default 1), so its first point is the
    cube midpoint rather than the all-zeros corner.
    """
    if n < 1:
        raise ValueError("need n >= 1 points")
    sampler = qmc.Sobol(d=d, scramble=False)
    sampler.fast_forward(skip)
    with warnings.catch_warnings():
        # Sobol balance only holds at powers of two; we knowingly draw
        # arbitrary prefixes of the fixed stream.
        warnings.simplefilter("ignore", UserWarning)
        return sampler.random(n)


@dataclass(frozen=True)
class TrustRegionState:
    """Anisotropic trust region in normalized coordinates."""

    center: np.ndarray  # (d,) inside the unit cube
    length: float = TR_LENGTH_INIT
    success_count: int = 0
    failure_count: int = 0

    def __post_init__(self):
        object.__setattr__(self, "center",
                           np.asarray(self.center, dtype=float))
        if not (TR_LENGTH_MIN <= self.length <= TR_LENGTH_MAX):
            raise ValueError(
                f"length must stay within [{TR_LENGTH_MIN}, {TR_LENGTH_MAX}]")
        if self.success_count < 0 or self.failure_count < 0:
            raise ValueError("counters must be nonnegative")
        if self.success_count and self.failure_count:
            raise ValueError("at most one counter may be nonzero")


def trust_region_sides(length: float, lengthscales: np.ndarray) -> np.ndarray:
    """Per-dimension box sides L * lambda_j / geomean(lambda), unclipped.

    Their product equals length**d for any positive lengthscales, so the
    box hypervolume is controlled by the base length alone.
    """
    lam = np.asarray(lengthscales, dtype=float)
    if np.any(lam <= 0):
        raise ValueError("lengthscales must be positive")
    geomean = np.exp(np.mean(np.log(lam)))
    return length * lam / geomean


def trust_region_box(tr: TrustRegionState,
                     lengthscales: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Trust-region interval box intersected with the unit cube."""
    sides = trust_region_sides(tr.length, lengthscales)
    lo = np.clip(tr.center - sides / 2.0, 0.0, 1.0)
    hi = np.clip(tr.center + sides / 2.0, 0.0, 1.0)
    return lo, hi


def update_trust_region(tr: TrustRegionState,
                        improved: bool) -> tuple[TrustRegionState, bool]:
    """Counter/length update; returns (new_state, reset_required).

    When repeated failures would shrink the base length below the minimum,
    the state comes back at the initial length with cleared counters and
    the second element is True: the caller restarts at the incumbent and
    discards the GP's training data.
    """
    if improved:
        succ = tr.success_count + 1
        if succ >= SUCCESS_TOL:
            return replace(tr, length=min(2.0 * tr.length, TR_LENGTH_MAX),
                           success_count=0, failure_count=0), False
        return replace(tr, success_count=succ, failure_count=0), False
    fail = tr.failure_count + 1
    if fail >= FAIL_TOL:
        new_len = tr.length / 2.0
        if new_len < TR_LENGTH_MIN:
            return replace(tr, length=TR_LENGTH_INIT,
                           success_count=0, failure_count=0), True
        return replace(tr, length=new_len,
                       success_count=0, failure_count=0), False
    return replace(tr, success_count=0, failure_count=fail), False


def propose_next(model: gp.GpModel, tr: TrustRegionState,
                 n_candidates: int, seed: int) -> np.ndarray:
    """Thompson-sampling proposal: argmax of one joint posterior draw over
    Sobol candidates inside the trust region (normalized coordinates)."""
    if n_candidates < 1:
        raise ValueError("need at least one candidate")
    lo, hi = trust_region_box(tr, model.lengthscales)
    cands = lo + sobol_points(tr.center.shape[0], n_candidates) * (hi - lo)
    draw = gp.sample_joint(model, cands, seed=seed)
    return cands[int(np.argmax(draw))]


@dataclass(frozen=True)
class EvalRecord:
    """One tuning episode: evaluated parameters and the measured reward."""

    episode: int  # 1-based
    theta: np.ndarray  # raw parameter units
    reward: float
    seed: int  # seed handed to the objective for this episode

    def __post_init__(self):
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float))
        if not np.isfinite(self.reward):
            raise ValueError("reward must be finite")


@dataclass(frozen=True)
class TuningResult:
    """Episode history plus the running-best (incumbent) traces."""

    records: tuple[EvalRecord, ...]
    incumbent_rewards: np.ndarray   # (n_episodes,) running max, non-decreasing
    incumbent_thetas: np.ndarray    # (n_episodes, d) raw units
    #: Trust-region base length after each episode's update (BO runs only).
    tr_lengths: np.ndarray | None = None
    #: Episodes whose update collapsed the region and restarted the search.
    resets: tuple[int, ...] = ()

    @property
    def best_theta(self) -> np.ndarray:
        return self.incumbent_thetas[-1]

    @property
    def best_reward(self) -> float:
        return float(self.incumbent_rewards[-1])


def _episode_seed(seed: int, episode: int) -> int:
    return int(np.random.SeedSequence([seed, 11, episode]).generate_state(1)[0])


def _ts_seed(seed: int, episode: int) -> int:
    return int(np.random.SeedSequence([seed, 13, episode]).generate_state(1)[0])


def _safe_eval(objective, theta: np.ndarray, ep_seed: int) -> float:
    """Evaluate the noisy objective; failures score 0 like a failed episode."""
    try:
        r = float(objective(theta, ep_seed))
    except (RuntimeError, ValueError, FloatingPointError, ZeroDivisionError):
        return 0.0
    return r if np.isfinite(r) else 0.0


def _is_improvement(reward: float, best: float) -> bool:
    return reward > best + IMPROVEMENT_REL * abs(best)


def run_bo(objective, theta_init: np.ndarray, lower: np.ndarray,
           upper: np.ndarray, n_episodes: int, seed: int,
           n_candidates: int | None = None) -> TuningResult:
    """Trust-region Bayesian optimization of a noisy objective.

    `objective(theta, episode_seed) -> reward` is maximized over the box
    [lower, upper].  Episode 1 evaluates `theta_init`; while fewer than
    `MIN_GP_POINTS` distinct points exist the loop takes Sobol perturbations
    inside the current trust region, then alternates GP fit / Thompson
    proposal / evaluation / trust-region update.
    """
    lower, upper = _check_bounds(lower, upper)
    d = lower.shape[0]
    theta_init = np.asarray(theta_init, dtype=float)
    if theta_init.shape != (d,):
        raise ValueError("theta_init dimension does not match bounds")
    if np.any(theta_init < lower) or np.any(theta_init > upper):
        raise ValueError("theta_init must lie inside the bounds")
    if n_episodes < 2:
        raise ValueError("need at least 2 episodes")
    if n_candidates is None:
        n_candidates = default_n_candidates(d)

    # One fixed perturbation stream for all bootstrap phases; its first
    # point (the cube midpoint) is dropped because episode 1 already
    # evaluates the starting parameters at the region center.
    boot_stream = sobol_points(d, n_episodes + 1)[1:]
    boot_used = 0

    tr = TrustRegionState(center=normalize(theta_init, lower, upper))
    records: list[EvalRecord] = []
    gp_x: list[np.ndarray] = []  # normalized points since the last restart
    gp_y: list[float] = []
    best_reward = -np.inf
    best_theta = theta_init.copy()
    inc_rewards = np.empty(n_episodes)
    inc_thetas = np.empty((n_episodes, d))
    tr_lengths = np.empty(n_episodes)
    resets: list[int] = []

    for ep in range(1, n_episodes + 1):
        if ep == 1:
            z = tr.center.copy()
        elif len(np.unique(np.array(gp_x).round(12), axis=0)) < MIN_GP_POINTS:
            lo, hi = trust_region_box(tr, np.ones(d))
            z = lo + boot_stream[boot_used % len(boot_stream)] * (hi - lo)
            boot_used += 1
        else:
            model = gp.fit(np.array(gp_x), np.array(gp_y),
                           seed=_ts_seed(seed, 10_000 + ep))
            z = propose_next(model, tr, n_candidates, seed=_ts_seed(seed, ep))

        theta = denormalize(z, lower, upper)
        ep_seed = _episode_seed(seed, ep)
        reward = _safe_eval(objective, theta, ep_seed)
        records.append(EvalRecord(episode=ep, theta=theta,
                                  reward=reward, seed=ep_seed))
        gp_x.append(z)
        gp_y.append(reward)

        improved = _is_improvement(reward, best_reward) if ep > 1 else True
        if reward > best_reward:
            best_reward = reward
            best_theta = theta
            tr = replace(tr, center=z)
        inc_rewards[ep - 1] = best_reward
        inc_thetas[ep - 1] = best_theta

        if ep > 1:
            tr, reset = update_trust_region(tr, improved)
            if reset:
                tr = replace(tr, center=normalize(best_theta, lower, upper))
                gp_x, gp_y = [], []
                resets.append(ep)
        tr_lengths[ep - 1] = tr.length

    return TuningResult(records=tuple(records),
                        incumbent_rewards=inc_rewards,
                        incumbent_thetas=inc_thetas,
                        tr_lengths=tr_lengths,
                        resets=tuple(resets))


def run_sobol_baseline(objective, theta_nom: np.ndarray, lower: np.ndarray,
                       upper: np.ndarray, n_episodes: int,
                       seed: int) -> TuningResult:
    """Quasi-random baseline: evaluate the first n_episodes Sobol points
    scaled into the bounds box.  The stream starts at the box midpoint, so
    with bounds centered on theta_nom episode 1 evaluates theta_nom."""
    lower, upper = _check_bounds(lower, upper)
    d = lower.shape[0]
    theta_nom = np.asarray(theta_nom, dtype=float)
    if theta_nom.shape != (d,):
        raise ValueError("theta_nom dimension does not match bounds")
    if n_episodes < 1:
        raise ValueError("need at least 1 episode")

    zs = sobol_points(d, n_episodes)
    records = []
    inc_rewards = np.empty(n_episodes)
    inc_thetas = np.empty((n_episodes, d))
    best_reward = -np.inf
    best_theta = denormalize(zs[0], lower, upper)
    for ep in range(1, n_episodes + 1):
        theta = denormalize(zs[ep - 1], lower, upper)
        ep_seed = _episode_seed(seed, ep)
        reward = _safe_eval(objective, theta, ep_seed)
        records.append(EvalRecord(episode=ep, theta=theta,
                                  reward=reward, seed=ep_seed))
        if reward > best_reward:
            best_reward = reward
            best_theta = theta
        inc_rewards[ep - 1] = best_reward
        inc_thetas[ep - 1] = best_theta
    return TuningResult(records=tuple(records),
                        incumbent_rewards=inc_rewards,
                        incumbent_thetas=inc_thetas)
