"""Convergence-rate experiments between the N-player game and its limit.

Each experiment runs seeded replications; one replication fixes a leader
noise realization, solves the conditional law flow for it, simulates the
N-player system and its synchronously coupled limit twin from the same
noise streams, and records squared path gaps, Wasserstein terms, or cost
gaps.  Means over replications feed an ordinary least-squares fit of
log gap against log N, which is then compared to the predicted exponent
for the scenario's regime.

Replications are independent work units seeded by (master seed, index), so
thread count never changes the numbers.
"""
from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ThreadPoolExecutor
from fractions import Fraction

import numpy as np

from ._rng import REPLICATION, SharedNoise, child_entropy
from .dynamics import (
    DelayLaw,
    ModelSpec,
    Policy,
    PolicySet,
    TimeGrid,
    TrajectoryBundle,
    evaluate_costs_nplayer,
    sample_delays,
    simulate_nplayer,
)
from .errors import (
    ExperimentInvalidError,
    ParameterError,
    ValidationError,
)
from .meanfield import (
    ConditionalLawFlow,
    balanced_partition_level,
    evaluate_costs_limit,
    partition_delay_law,
    simulate_limit_pair,
    solve_conditional_law,
)
from .measures import DiscreteMeasure, w2_exact_1d, w2_exact_lp

_SUPPORT_CAP = 512
_SDE_SLOPE_TOL = 0.25       # path-gap slopes carry more Monte-Carlo noise
_MEASURE_SLOPE_TOL = 0.15
_FAIL_FRACTION = 0.05

_REGIMES = ("general", "sigma0_control_free", "discrete_delta",
            "degenerate_delta", "linear_in_measure")
_QUANTITIES = ("squared_state_gap", "cost_gap")
# sharp two-sided rates vs constants-laden upper bounds
_ONE_SIDED_REGIMES = ("general", "sigma0_control_free", "discrete_delta")


# ---------------------------------------------------------------------------
# reports

@dataclasses.dataclass(frozen=True)
class GapReport:
    """Aggregated gap curves for one scenario plus the fitted slope.

    curves maps a quantity name to (means, stderrs) tuples over Ns; the
    slope is fitted on curves[quantity].  predicted_slope is the expected
    log-log slope in N for the declared regime, or None when no regime was
    declared.  verdict is pass/fail/undefined/unchecked.
    """

    scenario: str
    quantity: str
    Ns: tuple
    reps: int
    curves: dict
    slope: float | None
    slope_stderr: float | None
    r2: float | None
    predicted_slope: float | None
    predicted_rate: str | None
    verdict: str
    fixed_point_failures: int = 0

    def __post_init__(self):
        if self.quantity not in self.curves:
            raise ValidationError(
                f"fitted quantity {self.quantity!r} missing from curves")
        for name, (means, stderrs) in self.curves.items():
            if len(means) != len(self.Ns) or len(stderrs) != len(self.Ns):
                raise ValidationError(f"curve {name!r} length mismatch")
            if any(v < 0 for v in means):
                raise ValidationError(f"negative gap estimate in {name!r}")

    def curve(self, name: str):
        means, stderrs = self.curves[name]
        return np.asarray(means, float), np.asarray(stderrs, float)


@dataclasses.dataclass(frozen=True)
class EpsilonReport:
    """Deviation-library certification of a strategy profile.

    Gains are profile cost minus deviation cost for the deviating player
    (positive means the deviation improves), estimated with common random
    numbers; epsilon_hat floors the best follower gain at zero, and
    epsilon2_hat does the same for the leader library.
    """

    scenario: str
    N: int
    reps: int
    profile_leader_cost: float
    profile_follower_cost: float
    follower_costs: tuple
    follower_gains: tuple
    follower_gain_stderrs: tuple
    epsilon_hat: float
    leader_costs: tuple
    leader_gains: tuple
    leader_gain_stderrs: tuple
    epsilon2_hat: float
    common_random_numbers: bool = True

    def __post_init__(self):
        if self.epsilon_hat < 0 or self.epsilon2_hat < 0:
            raise ValidationError("epsilon estimates must be nonnegative")

    @property
    def best_follower_cost(self):
        return min(self.follower_costs, default=None)

    @property
    def best_leader_cost(self):
        return min(self.leader_costs, default=None)


@dataclasses.dataclass(frozen=True)
class EtaReport:
    """Orthogonality diagnostic for linear-in-measure interaction terms."""

    scenario: str
    N: int
    panels: int
    leader_paths: int
    time_index: int
    lhs: float
    rhs: float

    @property
    def ratio(self) -> float:
        return self.lhs / self.rhs


# ---------------------------------------------------------------------------
# slope fitting and predicted exponents

def fit_slope(Ns, values):
    """OLS fit of log(value) on log(N); returns (slope, stderr, r2)."""
    Ns = np.asarray(Ns, dtype=float)
    values = np.asarray(values, dtype=float)
    if Ns.ndim != 1 or Ns.shape != values.shape or Ns.size < 3:
        raise ValidationError("need at least 3 (N, value) pairs")
    if np.any(values <= 0) or not np.all(np.isfinite(values)):
        raise ValidationError("slope fit needs positive finite values")
    x = np.log(Ns)
    y = np.log(values)
    xc = x - x.mean()
    sxx = float(np.dot(xc, xc))
    if sxx <= 0:
        raise ValidationError("N values must not be all equal")
    slope = float(np.dot(xc, y - y.mean()) / sxx)
    resid = y - y.mean() - slope * xc
    rss = float(np.dot(resid, resid))
    tss = float(np.dot(y - y.mean(), y - y.mean()))
    stderr = math.sqrt(max(rss, 0.0) / (Ns.size - 2) / sxx)
    r2 = 1.0 if tss == 0.0 else 1.0 - rss / tss
    return slope, stderr, r2


def _rational(x) -> Fraction:
    return Fraction(x).limit_denominator(10 ** 6)


def predicted_exponent(n1: int, q: float, regime: str, quantity: str):
    """Predicted gap exponent for a scenario regime.

    Returns (exponent, rate string).  The exponent applies to f(N-1) for
    the f-based regimes and to 1/N for linear_in_measure; the string is the
    combined rate in N, with the log factor spelled out when n1 = 4.
    """
    if regime not in _REGIMES:
        raise ParameterError(f"unknown regime {regime!r}; choose from {_REGIMES}")
    if quantity not in _QUANTITIES:
        raise ParameterError(
            f"unknown quantity {quantity!r}; choose from {_QUANTITIES}")
    if not isinstance(n1, int) or n1 < 1:
        raise ParameterError(f"n1 must be a positive integer, got {n1!r}")
    squared = quantity == "squared_state_gap"
    if regime == "general":
        if q <= 4:
            raise ParameterError(
                f"general-regime exponents require q > 4, got q={q!r}")
        qf = _rational(q)
        expo = (2 * qf - 4) / (3 * qf - 4) if squared else (qf - 2) / (3 * qf - 4)
    elif regime == "sigma0_control_free":
        expo = Fraction(2, 3) if squared else Fraction(1, 3)
    else:
        # discrete_delta, degenerate_delta, linear_in_measure
        expo = Fraction(1) if squared else Fraction(1, 2)
    if regime == "linear_in_measure":
        return float(expo), f"N^({-expo})"
    if n1 < 4:
        rate = f"N^({-expo / 2})"
    elif n1 == 4:
        log_part = "log(N)" if expo == 1 else f"log(N)^({expo})"
        rate = f"N^({-expo / 2})*{log_part}"
    else:
        rate = f"N^({-expo * Fraction(2, n1)})"
    return float(expo), rate


def predicted_n_slope(n1: int, q: float, regime: str, quantity: str) -> float:
    """Predicted log-log slope in N, log factors at n1 = 4 ignored."""
    expo, _ = predicted_exponent(n1, q, regime, quantity)
    if regime == "linear_in_measure":
        return -expo
    if n1 <= 4:
        return -expo / 2.0
    return -expo * 2.0 / n1


def _verdict(slope, predicted, regime, tol):
    if slope is None:
        return "undefined"
    if regime is None or predicted is None:
        return "unchecked"
    if regime in _ONE_SIDED_REGIMES:
        return "pass" if slope <= predicted + tol else "fail"
    return "pass" if abs(slope - predicted) <= tol else "fail"


# ---------------------------------------------------------------------------
# replication plumbing

def _check_ns(Ns, min_n):
    Ns = [int(n) for n in Ns]
    if len(Ns) < 1 or any(b <= a for a, b in zip(Ns, Ns[1:])):
        raise ValidationError("Ns must be strictly increasing")
    if Ns[0] < min_n:
        raise ValidationError(f"smallest N must be >= {min_n}, got {Ns[0]}")
    return tuple(Ns)


def _run_replications(fn, reps, threads):
    """fn(r) for r in range(reps), results in replication order."""
    if threads is None or int(threads) <= 1:
        return [fn(r) for r in range(reps)]
    with ThreadPoolExecutor(max_workers=int(threads)) as pool:
        return list(pool.map(fn, range(reps)))


def _partition_for(law: DelayLaw, model: ModelSpec, N: int, level):
    """Delay partition used by the limit solve for population size N."""
    if law.kind == "degenerate":
        return ((law.a, 1.0),)
    if law.kind == "discrete":
        return tuple((float(a), float(p)) for a, p in zip(law.atoms, law.probs))
    if level == "auto":
        level = balanced_partition_level(model.n1, model.q, N)
    return tuple(partition_delay_law(law, int(level)))


def _flow_support(flow: ConditionalLawFlow, cap: int, rng):
    """Flattened (points over time, weights) view of the flow, subsampled to
    at most cap support points; uniform clouds subsample without
    replacement."""
    parts = flow.particles
    n_atoms, K = parts.shape[0], parts.shape[1]
    n = n_atoms * K
    flat = parts.reshape(n, parts.shape[2], parts.shape[3])
    w = np.repeat(flow.weights / K, K)
    w = w / w.sum()
    if n <= cap:
        return flat, w
    if np.allclose(w, w[0]):
        idx = np.sort(rng.choice(n, cap, replace=False))
        return flat[idx], np.full(cap, 1.0 / cap)
    idx = np.sort(rng.choice(n, cap, replace=True, p=w))
    return flat[idx], np.full(cap, 1.0 / cap)


def _w2sq_to_flow(points, zpoints, zweights) -> float:
    emp = DiscreteMeasure(points, np.full(len(points), 1.0 / len(points)))
    zmu = DiscreteMeasure(zpoints, zweights)
    if points.shape[1] == 1:
        val = w2_exact_1d(emp, zmu)
    else:
        val = w2_exact_lp(emp, zmu)[0]
    return val * val


def _w2_time_integral(paths, flow: ConditionalLawFlow, rng,
                      cap: int = _SUPPORT_CAP) -> float:
    """Rectangle-rule integral over [0, T] of W2^2 between the empirical
    measure of the given follower paths and the flow.

    Both supports are capped at `cap` points with the supplied generator;
    the subsample is drawn once and reused at every time index, and its
    noise is part of the reported spread.
    """
    grid = flow.grid
    m = grid.forward_steps
    zflat, zw = _flow_support(flow, cap, rng)
    if paths.shape[0] > cap:
        idx = np.sort(rng.choice(paths.shape[0], cap, replace=False))
        paths = paths[idx]
    total = 0.0
    for k in range(m):
        total += _w2sq_to_flow(paths[:, k, :], zflat[:, k, :], zw) * grid.h
    return total


def _sup_sq_gap(a, b):
    """Per-path sup over the grid of the squared euclidean gap."""
    gap = np.asarray(a, float) - np.asarray(b, float)
    sq = np.sum(gap * gap, axis=-1)
    return sq.max(axis=-1)


def _atom_sup_mean(values, delays):
    """Mean of `values` per realized delay value, then sup over those."""
    worst = 0.0
    for d in np.unique(delays):
        worst = max(worst, float(values[delays == d].mean()))
    return worst


def _aggregate(rows):
    """(reps, nN) array -> per-N mean and standard error tuples."""
    arr = np.asarray(rows, dtype=float)
    means = arr.mean(axis=0)
    if arr.shape[0] > 1:
        stderrs = arr.std(axis=0, ddof=1) / math.sqrt(arr.shape[0])
    else:
        stderrs = np.zeros(arr.shape[1])
    return tuple(float(v) for v in means), tuple(float(v) for v in stderrs)


def _fit_or_undefined(Ns, means):
    means = np.asarray(means, float)
    if np.any(means <= 0):
        return None, None, None
    return fit_slope(Ns, means)


def _check_failures(flags, reps):
    fails = int(sum(flags))
    if fails > _FAIL_FRACTION * reps:
        raise ExperimentInvalidError(
            f"fixed point failed to converge in {fails} of {reps} "
            f"replications (threshold {_FAIL_FRACTION:.0%})")
    return fails


# ---------------------------------------------------------------------------
# gap experiments

def state_gap_experiment(model: ModelSpec, policies: PolicySet,
                         delay_law: DelayLaw, Ns, reps: int, K: int, seed,
                         *, scenario: str = "state-gap", regime=None,
                         tol: float = 1e-3, max_iter: int = 25,
                         damping: float = 1.0, partition_level="auto",
                         slope_tol: float = _SDE_SLOPE_TOL,
                         threads: int = 1) -> GapReport:
    """Squared S2-norm gaps between the N-player game and its limit twin.

    Per replication: fix a leader noise realization, solve the conditional
    law for it, then for each N simulate the bundle and the synchronously
    coupled limit pair from shared streams.  Records the leader sup-squared
    gap, the follower gap as sup over realized delay atoms of the per-atom
    mean, their sum (the fitted quantity), and the time integral of W2^2
    between the leave-one-out limit empirical and the flow.
    """
    Ns = _check_ns(Ns, 4)
    if reps < 50:
        raise ValidationError(f"need reps >= 50, got {reps}")
    parts = {N: _partition_for(delay_law, model, N, partition_level) for N in Ns}

    def one_rep(r):
        ent = child_entropy(int(seed), REPLICATION, r)
        noise = SharedNoise(ent)
        flows = {}
        failed = False
        out = np.empty((4, len(Ns)))
        for j, N in enumerate(Ns):
            key = parts[N]
            if key not in flows:
                flow, rep = solve_conditional_law(
                    model, policies, key, ent, K,
                    tol=tol, max_iter=max_iter, damping=damping)
                flows[key] = flow
                failed = failed or not rep.converged
            flow = flows[key]
            bundle = simulate_nplayer(model, policies, N, delay_law, noise)
            x0, x1 = simulate_limit_pair(
                model, policies, flow, noise, bundle.delays)
            lead = float(_sup_sq_gap(bundle.leader_path, x0))
            fol = _atom_sup_mean(
                _sup_sq_gap(bundle.follower_paths, x1), bundle.delays)
            out[0, j] = lead
            out[1, j] = fol
            out[2, j] = lead + fol
            out[3, j] = _w2_time_integral(x1[1:], flow, noise.subsample())
        return out, failed

    results = _run_replications(one_rep, int(reps), threads)
    fails = _check_failures([f for _, f in results], reps)
    stack = np.stack([row for row, _ in results])    # (reps, 4, nN)
    curves = {
        "leader_sq_gap": _aggregate(stack[:, 0, :]),
        "follower_sq_gap": _aggregate(stack[:, 1, :]),
        "squared_state_gap": _aggregate(stack[:, 2, :]),
        "w2_time_integral": _aggregate(stack[:, 3, :]),
    }
    slope, stderr, r2 = _fit_or_undefined(Ns, curves["squared_state_gap"][0])
    pred = rate = None
    if regime is not None:
        pred = predicted_n_slope(model.n1, model.q, regime, "squared_state_gap")
        rate = predicted_exponent(model.n1, model.q, regime,
                                  "squared_state_gap")[1]
    return GapReport(
        scenario=scenario, quantity="squared_state_gap", Ns=Ns, reps=int(reps),
        curves=curves, slope=slope, slope_stderr=stderr, r2=r2,
        predicted_slope=pred, predicted_rate=rate,
        verdict=_verdict(slope, pred, regime, slope_tol),
        fixed_point_failures=fails)


def wasserstein_gap_curve(model: ModelSpec, policies: PolicySet,
                          delay_law: DelayLaw, Ns, reps: int, K: int, seed,
                          *, scenario: str = "w2-curve", regime=None,
                          tol: float = 1e-3, max_iter: int = 25,
                          damping: float = 1.0, partition_level="auto",
                          slope_tol: float = _MEASURE_SLOPE_TOL,
                          threads: int = 1) -> GapReport:
    """E integral of W2^2 between the empirical measure of N-1 i.i.d. limit
    followers and the conditional law, as a curve in N.

    The followers share one leader realization per replication and draw
    i.i.d. delays; smaller N reuse the leading follower streams of larger N,
    which correlates curve points without biasing any of them.
    """
    Ns = _check_ns(Ns, 2)
    if reps < 50:
        raise ValidationError(f"need reps >= 50, got {reps}")
    parts = {N: _partition_for(delay_law, model, N, partition_level) for N in Ns}

    def one_rep(r):
        ent = child_entropy(int(seed), REPLICATION, r)
        noise = SharedNoise(ent)
        flows = {}
        failed = False
        out = np.empty(len(Ns))
        delays_all = sample_delays(delay_law, max(Ns) - 1, noise)
        for j, N in enumerate(Ns):
            key = parts[N]
            if key not in flows:
                flow, rep = solve_conditional_law(
                    model, policies, key, ent, K,
                    tol=tol, max_iter=max_iter, damping=damping)
                flows[key] = flow
                failed = failed or not rep.converged
            flow = flows[key]
            _, x1 = simulate_limit_pair(
                model, policies, flow, noise, delays_all[:N - 1])
            out[j] = _w2_time_integral(x1, flow, noise.subsample())
        return out, failed

    results = _run_replications(one_rep, int(reps), threads)
    fails = _check_failures([f for _, f in results], reps)
    stack = np.stack([row for row, _ in results])
    curves = {"w2_time_integral": _aggregate(stack)}
    slope, stderr, r2 = _fit_or_undefined(Ns, curves["w2_time_integral"][0])
    pred = rate = None
    if regime is not None:
        # the W2^2 term carries one power of f(N-1)
        pred = predicted_n_slope(model.n1, model.q, regime, "squared_state_gap")
        rate = predicted_exponent(model.n1, model.q, regime,
                                  "squared_state_gap")[1]
    return GapReport(
        scenario=scenario, quantity="w2_time_integral", Ns=Ns, reps=int(reps),
        curves=curves, slope=slope, slope_stderr=stderr, r2=r2,
        predicted_slope=pred, predicted_rate=rate,
        verdict=_verdict(slope, pred, regime, slope_tol),
        fixed_point_failures=fails)


def cost_gap_experiment(model: ModelSpec, policies: PolicySet,
                        delay_law: DelayLaw, Ns, reps: int, K: int, seed,
                        *, scenario: str = "cost-gap", regime=None,
                        tol: float = 1e-3, max_iter: int = 25,
                        damping: float = 1.0, partition_level="auto",
                        slope_tol: float = _SDE_SLOPE_TOL,
                        threads: int = 1) -> GapReport:
    """|J^{i,N} - J^i| and |J^{0,N} - J^0| on synchronously coupled runs.

    Both cost stacks are evaluated on the same common-random-number
    trajectories, so the differences measure the finite-population effect
    and not Monte-Carlo noise.  The fitted quantity is the mean absolute
    follower cost gap.
    """
    Ns = _check_ns(Ns, 4)
    if reps < 50:
        raise ValidationError(f"need reps >= 50, got {reps}")
    parts = {N: _partition_for(delay_law, model, N, partition_level) for N in Ns}

    def one_rep(r):
        ent = child_entropy(int(seed), REPLICATION, r)
        noise = SharedNoise(ent)
        flows = {}
        failed = False
        out = np.empty((2, len(Ns)))
        for j, N in enumerate(Ns):
            key = parts[N]
            if key not in flows:
                flow, rep = solve_conditional_law(
                    model, policies, key, ent, K,
                    tol=tol, max_iter=max_iter, damping=damping)
                flows[key] = flow
                failed = failed or not rep.converged
            flow = flows[key]
            bundle = simulate_nplayer(model, policies, N, delay_law, noise)
            x0, x1 = simulate_limit_pair(
                model, policies, flow, noise, bundle.delays)
            j0n, jin = evaluate_costs_nplayer(bundle, model)
            j0l, jil = evaluate_costs_limit(
                model, policies, flow, x0, x1, bundle.delays)
            out[0, j] = float(np.mean(np.abs(np.array(jin) - np.array(jil))))
            out[1, j] = abs(j0n - j0l)
        return out, failed

    results = _run_replications(one_rep, int(reps), threads)
    fails = _check_failures([f for _, f in results], reps)
    stack = np.stack([row for row, _ in results])
    curves = {
        "cost_gap": _aggregate(stack[:, 0, :]),
        "leader_cost_gap": _aggregate(stack[:, 1, :]),
    }
    slope, stderr, r2 = _fit_or_undefined(Ns, curves["cost_gap"][0])
    pred = rate = None
    if regime is not None:
        pred = predicted_n_slope(model.n1, model.q, regime, "cost_gap")
        rate = predicted_exponent(model.n1, model.q, regime, "cost_gap")[1]
    return GapReport(
        scenario=scenario, quantity="cost_gap", Ns=Ns, reps=int(reps),
        curves=curves, slope=slope, slope_stderr=stderr, r2=r2,
        predicted_slope=pred, predicted_rate=rate,
        verdict=_verdict(slope, pred, regime, slope_tol),
        fixed_point_failures=fails)


# ---------------------------------------------------------------------------
# per-replication coupling properties

def synchronous_dominance_check(grid: TimeGrid, y_paths, x_paths):
    """(lhs, rhs) of the coupling bound: rectangle-rule integral of
    W2^2(empirical y, empirical x) against T times the mean sup-squared gap.

    The identity pairing is one admissible coupling of the two empiricals,
    so lhs <= rhs up to LP tolerance on every replication.
    """
    y = np.asarray(y_paths, float)
    x = np.asarray(x_paths, float)
    if y.shape != x.shape or y.ndim != 3:
        raise ValidationError("paths must be matching (P, m+1, d) arrays")
    P = y.shape[0]
    lhs = 0.0
    for k in range(grid.forward_steps):
        mu = DiscreteMeasure(y[:, k, :], np.full(P, 1.0 / P))
        nu = DiscreteMeasure(x[:, k, :], np.full(P, 1.0 / P))
        val = w2_exact_1d(mu, nu) if y.shape[2] == 1 else w2_exact_lp(mu, nu)[0]
        lhs += val * val * grid.h
    rhs = grid.T * float(np.mean(_sup_sq_gap(y, x)))
    return lhs, rhs


def leave_one_out_check(points, i: int = 0):
    """(lhs, rhs) of the leave-one-out bound at one time slice:
    W2^2(full empirical, empirical without point i) against (1/N) times
    W2^2(Dirac at point i, empirical without point i), both via the LP
    oracle."""
    pts = np.asarray(points, float)
    if pts.ndim == 1:
        pts = pts[:, None]
    N = pts.shape[0]
    if N < 2:
        raise ValidationError("need at least 2 points")
    loo_pts = np.delete(pts, i, axis=0)
    full = DiscreteMeasure(pts, np.full(N, 1.0 / N))
    loo = DiscreteMeasure(loo_pts, np.full(N - 1, 1.0 / (N - 1)))
    dirac = DiscreteMeasure(pts[i:i + 1], np.array([1.0]))
    lhs = w2_exact_lp(full, loo)[0] ** 2
    rhs = w2_exact_lp(dirac, loo)[0] ** 2 / N
    return lhs, rhs


# ---------------------------------------------------------------------------
# epsilon-Nash certification

def _policies_equal(a: Policy, b: Policy) -> bool:
    return a.family == b.family and dict(a.params) == dict(b.params)


def _deviant_follower_policy(profile: PolicySet, deviation: Policy,
                             p1: int, index: int = 0) -> Policy:
    """Follower policy equal to the profile except that follower `index`
    plays the deviation."""
    dev_set = PolicySet(profile.leader, deviation)

    def fn(t, x1, feats, x0_delayed, deltas):
        base = np.asarray(
            profile.follower_value(t, x1, feats, x0_delayed, deltas, p1),
            dtype=float)
        if base.shape != x1.shape[:-1] + (p1,):
            base = np.broadcast_to(base, x1.shape[:-1] + (p1,)).copy()
        row = dev_set.follower_value(
            t, x1[index:index + 1], feats, x0_delayed[index:index + 1],
            deltas[index:index + 1], p1)
        base = np.array(base)
        base[index] = np.asarray(row, float).reshape(-1)[:p1]
        return base

    return Policy("custom", {"fn": fn})


def _control_energy(controls, h) -> np.ndarray:
    """Rectangle-rule integral of |v_t|^2 per player; controls (..., m, p)."""
    sq = np.sum(np.asarray(controls, float) ** 2, axis=-1)
    return sq.sum(axis=-1) * h


def epsilon_nash_certify(model: ModelSpec, profile: PolicySet,
                         deviation_library, N: int, reps: int, seed,
                         *, delay_law: DelayLaw, kappa: float = math.inf,
                         gamma: float = math.inf,
                         scenario: str = "epsilon-nash",
                         threads: int = 1) -> EpsilonReport:
    """Finite-library certification of the profile at population size N.

    Every library entry must change exactly one role relative to the
    profile (or be the profile itself, counted as a follower deviation).
    Follower deviations are played by follower 0 with everyone else on the
    profile; leader deviations swap the leader law.  All arms of one
    replication share noise streams and delays.  Control norms are
    estimated along the runs and checked against kappa (followers, per
    realized delay) and gamma (leader).
    """
    if N < 2 or N > 64:
        raise ValidationError(f"N must be in [2, 64] for full-game runs, got {N}")
    if reps < 1:
        raise ValidationError("need at least 1 replication")
    library = list(deviation_library)
    if not library:
        raise ValidationError("deviation library must be nonempty")
    follower_devs, leader_devs = [], []
    for k, dev in enumerate(library):
        lead_diff = not _policies_equal(dev.leader, profile.leader)
        fol_diff = not _policies_equal(dev.follower, profile.follower)
        if lead_diff and fol_diff:
            raise ValidationError(
                f"deviation {k} changes both the leader and the follower role")
        if lead_diff:
            leader_devs.append((k, dev.leader))
        else:
            follower_devs.append((k, dev.follower))

    arms = [("profile", profile)]
    for k, pol in follower_devs:
        mixed = PolicySet(
            profile.leader, _deviant_follower_policy(profile, pol, model.p1),
            holder_l=profile.holder_l)
        arms.append((f"follower_dev_{k}", mixed))
    for k, pol in leader_devs:
        arms.append((f"leader_dev_{k}",
                     PolicySet(pol, profile.follower, holder_l=profile.holder_l)))

    def one_rep(r):
        ent = child_entropy(int(seed), REPLICATION, r)
        noise = SharedNoise(ent)
        delays = sample_delays(delay_law, N, noise)
        j0 = np.empty(len(arms))
        j1 = np.empty(len(arms))
        dev_energy = np.empty(len(arms))
        lead_energy = np.empty(len(arms))
        delta0 = 0.0
        for a, (_, pols) in enumerate(arms):
            bundle = simulate_nplayer(
                model, pols, N, delay_law, noise,
                _noise_overrides={"delays": delays})
            j0n, jin = evaluate_costs_nplayer(bundle, model)
            j0[a] = j0n
            j1[a] = jin[0]
            dev_energy[a] = _control_energy(
                bundle.controls_applied["followers"][0], model.grid.h)
            lead_energy[a] = _control_energy(
                bundle.controls_applied["leader"], model.grid.h)
            delta0 = float(bundle.delays[0])
        return j0, j1, dev_energy, lead_energy, delta0

    results = _run_replications(one_rep, int(reps), threads)
    j0 = np.stack([r[0] for r in results])           # (reps, arms)
    j1 = np.stack([r[1] for r in results])
    denergy = np.stack([r[2] for r in results])
    lenergy = np.stack([r[3] for r in results])
    delta0 = np.array([r[4] for r in results])

    # numeric norm-cap checks; follower cap per realized delay of follower 0
    for a, (k, _) in enumerate(follower_devs, start=1):
        worst = _atom_sup_mean(denergy[:, a], delta0)
        if worst > kappa + 1e-9:
            raise ValidationError(
                f"deviation {k} violates the follower norm cap: "
                f"sup_delta E|v1|^2 = {worst!r} > kappa = {kappa!r}")
    off = 1 + len(follower_devs)
    for a, (k, _) in enumerate(leader_devs):
        mean_energy = float(lenergy[:, off + a].mean())
        if mean_energy > gamma + 1e-9:
            raise ValidationError(
                f"deviation {k} violates the leader norm cap: "
                f"E|v0|^2 = {mean_energy!r} > gamma = {gamma!r}")

    def gain_stats(profile_col, dev_col):
        gains = profile_col - dev_col
        mean = float(gains.mean())
        if gains.size > 1:
            se = float(gains.std(ddof=1) / math.sqrt(gains.size))
        else:
            se = 0.0
        return mean, se

    f_costs, f_gains, f_ses = [], [], []
    for a in range(1, off):
        f_costs.append(float(j1[:, a].mean()))
        mean, se = gain_stats(j1[:, 0], j1[:, a])
        f_gains.append(mean)
        f_ses.append(se)
    l_costs, l_gains, l_ses = [], [], []
    for a in range(off, len(arms)):
        l_costs.append(float(j0[:, a].mean()))
        mean, se = gain_stats(j0[:, 0], j0[:, a])
        l_gains.append(mean)
        l_ses.append(se)

    return EpsilonReport(
        scenario=scenario, N=int(N), reps=int(reps),
        profile_leader_cost=float(j0[:, 0].mean()),
        profile_follower_cost=float(j1[:, 0].mean()),
        follower_costs=tuple(f_costs), follower_gains=tuple(f_gains),
        follower_gain_stderrs=tuple(f_ses),
        epsilon_hat=max(0.0, max(f_gains, default=0.0)),
        leader_costs=tuple(l_costs), leader_gains=tuple(l_gains),
        leader_gain_stderrs=tuple(l_ses),
        epsilon2_hat=max(0.0, max(l_gains, default=0.0)))


# ---------------------------------------------------------------------------
# orthogonality diagnostic

def eta_orthogonality_check(model: ModelSpec, policies: PolicySet,
                            delay_law: DelayLaw, N: int, panels: int,
                            leader_paths: int, K: int, seed,
                            *, time_index=None, scenario: str = "eta",
                            tol: float = 1e-3, max_iter: int = 25,
                            damping: float = 1.0,
                            threads: int = 1) -> EtaReport:
    """Monte-Carlo check that centered interaction kernels of i.i.d. limit
    followers are conditionally uncorrelated given the leader path.

    Estimates lhs = E[(mean over N-1 followers of eta)^2] and
    rhs = E[|eta|^2]/(N-1), where eta is the interaction kernel evaluated
    at one fixed grid time and centered per leader path; their ratio is
    near 1 exactly when the cross terms vanish.
    """
    if model.coefficients.family != "linear_in_measure":
        raise ParameterError(
            "the orthogonality check targets the linear_in_measure family")
    if N < 2 or panels < 1 or leader_paths < 1:
        raise ValidationError("need N >= 2, panels >= 1, leader_paths >= 1")
    m = model.grid.forward_steps
    s = m // 2 if time_index is None else int(time_index)
    if not 0 <= s <= m:
        raise ValidationError(f"time index {s} outside the forward grid")
    kernel = model.coefficients.params.get("kernel", "mean")
    P = panels * (N - 1)

    def one_path(r):
        ent = child_entropy(int(seed), REPLICATION, r)
        part = _partition_for(delay_law, model, N, "auto")
        flow, _ = solve_conditional_law(
            model, policies, part, ent, K,
            tol=tol, max_iter=max_iter, damping=damping)
        noise = SharedNoise(ent)
        delays = sample_delays(delay_law, P, noise)
        _, x1 = simulate_limit_pair(model, policies, flow, noise, delays)
        vals = x1[:, s, :]
        if kernel == "tanh_mean":
            vals = np.tanh(vals)
        eta = vals - vals.mean(axis=0)
        eta = eta.reshape(panels, N - 1, -1)
        lhs_rows = np.sum(eta.mean(axis=1) ** 2, axis=1)
        rhs_rows = np.sum(eta ** 2, axis=2).mean(axis=1)
        return float(lhs_rows.sum()), float(rhs_rows.sum())

    results = _run_replications(one_path, int(leader_paths), threads)
    total = leader_paths * panels
    lhs = sum(a for a, _ in results) / total
    rhs = sum(b for _, b in results) / total / (N - 1)
    return EtaReport(scenario=scenario, N=int(N), panels=int(panels),
                     leader_paths=int(leader_paths), time_index=s,
                     lhs=lhs, rhs=rhs)
