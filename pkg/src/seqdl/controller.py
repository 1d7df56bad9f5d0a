"""Concurrency controller: utility scoring and online stream-count tuning.

The controller treats the number of active download streams as the decision
variable of an online optimization problem.  Each probing window yields a
mean throughput at the current concurrency; the utility function trades that
throughput against per-stream overhead, and either a hill-climbing gradient
stepper (default) or a Gaussian-process Bayesian optimizer proposes the next
concurrency level.
"""
from __future__ import annotations

import logging
import math
import random
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_K = 1.02
DEFAULT_MAX_CONCURRENCY = 64
DEFAULT_INITIAL_CONCURRENCY = 1
DEFAULT_PROBE_SECONDS = 3.0
DEFAULT_STEP_CAP = 8

#: Random trials used to seed the Bayesian surrogate before the first fit.
BAYES_SEED_TRIALS = 3
#: Squared-exponential kernel length scale, in concurrency levels.
BAYES_LENGTH_SCALE = 4.0


def utility(throughput_mbps: float, concurrency: int, k: float) -> float:
    """Score a throughput observation: throughput / k**concurrency.

    Higher throughput raises the score; every extra stream divides it by k,
    so concurrency only pays off when the throughput gain beats the penalty.
    """
    if k <= 1.0:
        raise ValueError(f"penalty coefficient must be > 1, got {k}")
    if concurrency < 1:
        raise ValueError(f"concurrency must be >= 1, got {concurrency}")
    if throughput_mbps < 0:
        raise ValueError(f"throughput must be >= 0, got {throughput_mbps}")
    return throughput_mbps / k**concurrency


def theoretical_optimum(k: float) -> float:
    """Concurrency ceiling 1/ln(k) of the fixed-rate-per-stream utility model.

    With throughput proportional to the stream count, c/k**c peaks at exactly
    this (generally non-integer) level; the penalty k therefore caps how far
    the controller will ever climb.
    """
    if k <= 1.0:
        raise ValueError(f"penalty coefficient must be > 1, got {k}")
    return 1.0 / math.log(k)


@dataclass
class ProbeResult:
    """Aggregated throughput for one probing window at a fixed concurrency."""

    mean_throughput_mbps: float
    window_seconds: float
    concurrency_used: int

    def __post_init__(self) -> None:
        if self.mean_throughput_mbps < 0:
            raise ValueError("mean throughput must be >= 0")
        if self.window_seconds <= 0:
            raise ValueError("probe window must be positive")


@dataclass
class OptimizerState:
    """Memory of the gradient stepper between probes.

    ``step_limit`` is the current ceiling on the doubling step: it halves on
    every direction reversal (so the walk tightens onto the optimum) and
    regrows after four consecutive improvements (so a shifted optimum can be
    chased again).  ``last_gradient`` keeps the most recent finite-difference
    estimate for inspection.
    """

    current: int
    previous: int
    previous_utility: float | None = None
    direction: int = 1
    step: int = 1
    step_limit: int = DEFAULT_STEP_CAP
    improve_streak: int = 0
    last_gradient: float | None = None
    history: list[tuple[int, float]] = field(default_factory=list)


def _clamp(c: int, lo: int, hi: int) -> int:
    return max(lo, min(hi, c))


def gd_propose(
    state: OptimizerState,
    probe: ProbeResult,
    k: float,
    c_max: int = DEFAULT_MAX_CONCURRENCY,
    step_cap: int = DEFAULT_STEP_CAP,
) -> tuple[OptimizerState, int]:
    """Score one probe and propose the next concurrency level.

    Sign-based hill climbing on the utility: while moves keep improving the
    score the step doubles (capped), and on the first worsening move the
    direction reverses with the step reset to 1.  A zero-throughput window at
    active concurrency is treated as a congestion signal and forces a
    reversal outright.  The proposal is clamped to [1, c_max].

    Returns the updated state and the proposed level.  ``state`` is mutated
    in place and returned for convenience.
    """
    if probe.concurrency_used != state.current:
        raise ValueError(
            f"probe measured concurrency {probe.concurrency_used}, "
            f"expected current level {state.current}"
        )
    u = utility(probe.mean_throughput_mbps, state.current, k)
    dc = state.current - state.previous
    state.last_gradient = (
        (u - state.previous_utility) / dc
        if dc != 0 and state.previous_utility is not None
        else None
    )

    if probe.mean_throughput_mbps <= 0:
        # Congestion signal: active streams moved no bytes.
        next_level = _reverse(state, c_max)
    elif state.previous_utility is None or dc == 0:
        # No comparison point yet (first probe, re-probe, or clamped move):
        # keep moving along the current direction.
        next_level = _advance(state, c_max, step_cap)
    else:
        du = u - state.previous_utility
        if du > 0:
            next_level = _advance(state, c_max, step_cap)
        elif du < 0:
            next_level = _reverse(state, c_max)
        else:
            # Exact tie: hold the level and direction, let a re-probe decide.
            next_level = state.current

    state.history.append((state.current, u))
    state.previous = state.current
    state.previous_utility = u
    state.current = next_level
    return state, next_level


def _advance(state: OptimizerState, c_max: int, step_cap: int) -> int:
    state.improve_streak += 1
    if state.improve_streak >= 4:
        state.step_limit = min(state.step_limit * 2, step_cap)
    state.step = min(state.step * 2, state.step_limit)
    return _clamp(state.current + state.direction * state.step, 1, c_max)


def _reverse(state: OptimizerState, c_max: int) -> int:
    state.direction = -state.direction
    state.improve_streak = 0
    state.step_limit = max(1, state.step_limit // 2)
    state.step = 1
    return _clamp(state.current + state.direction * state.step, 1, c_max)


@dataclass
class BayesState:
    """Observations and seeding budget of the Bayesian optimizer."""

    observations: list[tuple[int, float]] = field(default_factory=list)
    seed_trials_remaining: int = BAYES_SEED_TRIALS
    rng_seed: int = 0
    rng: random.Random = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.rng is None:
            self.rng = random.Random(self.rng_seed)


def bayes_propose(
    state: BayesState,
    probe: ProbeResult,
    k: float,
    c_max: int = DEFAULT_MAX_CONCURRENCY,
) -> tuple[BayesState, int]:
    """Record one probe and propose the next level via a GP surrogate.

    The first ``BAYES_SEED_TRIALS`` proposals are uniform draws from the
    seeded generator.  Afterwards a Gaussian process (squared-exponential
    kernel, length scale ``BAYES_LENGTH_SCALE`` levels, observation noise
    pooled from replicate spread) is fit over all scored observations, and
    the integer level maximizing expected improvement is proposed.  EI ties
    are broken toward the lowest untried level, then the lowest level.
    """
    u = utility(probe.mean_throughput_mbps, probe.concurrency_used, k)
    state.observations.append((probe.concurrency_used, u))
    if state.seed_trials_remaining > 0:
        state.seed_trials_remaining -= 1
        return state, state.rng.randint(1, c_max)
    return state, _ei_argmax(state.observations, c_max)


def _ei_argmax(observations: list[tuple[int, float]], c_max: int) -> int:
    """Integer level in [1, c_max] maximizing expected improvement."""
    x = np.array([c for c, _ in observations], dtype=float)
    y = np.array([u for _, u in observations], dtype=float)
    mean_y = float(y.mean())
    signal_var = max(float(y.var()), 1e-12)
    noise_var = _replicate_noise_var(observations, signal_var)

    ell2 = BAYES_LENGTH_SCALE**2
    diffs = x[:, None] - x[None, :]
    kern = signal_var * np.exp(-(diffs**2) / (2 * ell2))
    kern[np.diag_indices_from(kern)] += noise_var + 1e-10 * signal_var

    resid = y - mean_y
    alpha = np.linalg.solve(kern, resid)
    kinv = np.linalg.inv(kern)

    cand = np.arange(1, c_max + 1, dtype=float)
    cross = signal_var * np.exp(-((cand[:, None] - x[None, :]) ** 2) / (2 * ell2))
    mu = mean_y + cross @ alpha
    var = signal_var - np.einsum("ij,jk,ik->i", cross, kinv, cross)
    sigma = np.sqrt(np.clip(var, 0.0, None))

    best = float(y.max())
    ei = _expected_improvement(mu, sigma, best)

    top = float(ei.max())
    ties = [int(c) for c, e in zip(cand, ei) if e >= top - 1e-12 * max(abs(top), 1.0)]
    tried = {c for c, _ in observations}
    untried = [c for c in ties if c not in tried]
    return min(untried) if untried else min(ties)


def _replicate_noise_var(observations: list[tuple[int, float]], signal_var: float) -> float:
    """Pooled within-level variance; falls back to a small jitter without replicates."""
    groups: dict[int, list[float]] = {}
    for c, u in observations:
        groups.setdefault(c, []).append(u)
    ss = 0.0
    dof = 0
    for vals in groups.values():
        if len(vals) >= 2:
            m = sum(vals) / len(vals)
            ss += sum((v - m) ** 2 for v in vals)
            dof += len(vals) - 1
    if dof > 0:
        return max(ss / dof, 1e-12)
    return 1e-6 * signal_var


def _expected_improvement(mu: np.ndarray, sigma: np.ndarray, best: float) -> np.ndarray:
    z = np.zeros_like(mu)
    mask = sigma > 0
    z[mask] = (mu[mask] - best) / sigma[mask]
    cdf = 0.5 * (1.0 + np.vectorize(math.erf)(z / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * z**2) / math.sqrt(2.0 * math.pi)
    ei = (mu - best) * cdf + sigma * pdf
    ei[~mask] = np.maximum(mu[~mask] - best, 0.0)
    return ei


@dataclass
class ControllerConfig:
    """Tuning knobs shared by the real transfer loop and the simulator."""

    k: float = DEFAULT_K
    probe_seconds: float = DEFAULT_PROBE_SECONDS
    optimizer: str = "gd"
    max_concurrency: int = DEFAULT_MAX_CONCURRENCY
    initial_concurrency: int = DEFAULT_INITIAL_CONCURRENCY
    rng_seed: int = 0
    step_cap: int = DEFAULT_STEP_CAP

    def __post_init__(self) -> None:
        if self.k <= 1.0:
            raise ValueError(f"penalty coefficient must be > 1, got {self.k}")
        if self.probe_seconds <= 0:
            raise ValueError("probe window must be positive")
        if self.optimizer not in ("gd", "bayes"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not 1 <= self.initial_concurrency <= self.max_concurrency:
            raise ValueError(
                f"initial concurrency {self.initial_concurrency} outside "
                f"[1, {self.max_concurrency}]"
            )


class GradientDescentController:
    """Stateful wrapper around :func:`gd_propose` for loop consumers."""

    method = "gd"

    def __init__(self, cfg: ControllerConfig) -> None:
        self.cfg = cfg
        c0 = cfg.initial_concurrency
        self.state = OptimizerState(current=c0, previous=c0, step_limit=cfg.step_cap)

    @property
    def history(self) -> list[tuple[int, float]]:
        return self.state.history

    def propose(self, probe: ProbeResult) -> int:
        self.state, nxt = gd_propose(
            self.state, probe, self.cfg.k, self.cfg.max_concurrency, self.cfg.step_cap
        )
        return nxt


class BayesianController:
    """Stateful wrapper around :func:`bayes_propose` for loop consumers."""

    method = "bayes"

    def __init__(self, cfg: ControllerConfig) -> None:
        self.cfg = cfg
        self.state = BayesState(rng_seed=cfg.rng_seed)

    @property
    def history(self) -> list[tuple[int, float]]:
        return self.state.observations

    def propose(self, probe: ProbeResult) -> int:
        self.state, nxt = bayes_propose(
            self.state, probe, self.cfg.k, self.cfg.max_concurrency
        )
        return nxt


def make_controller(cfg: ControllerConfig):
    if cfg.optimizer == "bayes":
        return BayesianController(cfg)
    return GradientDescentController(cfg)


def optimizer_loop(control, telemetry, cfg: ControllerConfig):
    """Run the probe/score/propose loop until the transfer completes.

    ``control`` supplies ``set_concurrency(n)``, ``is_complete()`` and
    ``wait_window(seconds)`` (which may elapse in real or virtual time and
    returns early on completion); ``telemetry`` supplies ``now()`` and
    ``aggregate(start, end)``.  The loop is the only writer of worker
    statuses.  On exit, worker statuses are set to 0.

    Returns the controller, whose history holds all scored probes.
    """
    controller = make_controller(cfg)
    current = cfg.initial_concurrency
    try:
        if not control.is_complete():
            control.set_concurrency(current)
        while not control.is_complete():
            t0 = telemetry.now()
            control.wait_window(cfg.probe_seconds)
            t1 = telemetry.now()
            if t1 <= t0:
                continue
            agg = telemetry.aggregate(t0, t1)
            probe = ProbeResult(agg.mean_mbps, t1 - t0, current)
            if control.is_complete():
                controller.history.append((current, utility(agg.mean_mbps, current, cfg.k)))
                break
            proposed = controller.propose(probe)
            if proposed != current:
                control.set_concurrency(proposed)
                current = proposed
    finally:
        control.set_concurrency(0)
    return controller
