"""Time-grid SDE engine for a leader and N followers with random response
delays.

The leader state lives on [-b, T] (its segment on [-b, 0] is a sampled
initial path), followers live on [0, T].  Follower i observes the leader
state lagged by its own delay delta_i and interacts with the other followers
through declared empirical-measure features, computed leave-one-out for
followers and over the full population for the leader.  Time stepping is
explicit Euler with left-endpoint coefficient evaluation; delays are snapped
to the grid so the delayed lookup is an exact array index.
"""
from __future__ import annotations

import dataclasses
import functools
import math
from types import MappingProxyType

import numpy as np

from ._rng import SharedNoise, exact_sum, generator, DELAY, LEADER_INIT, PROBE
from .errors import (
    DimensionError,
    ParameterError,
    SimulationDivergedError,
    ValidationError,
)
from .measures import DiscreteMeasure, w2_exact_lp

_GRID_TOL = 1e-12

# reported mean-square increment exponent q~ per initial-path family
# (constant paths have zero increments; any exponent is valid)
INITIAL_PATH_INCREMENT_EXPONENT = {
    "constant": 1.0,
    "ou_path": 1.0,
    "scaled_brownian": 1.0,
}

FEATURE_NAMES = ("mean", "second_moment", "tanh_mean")


@dataclasses.dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [-b, T] with step h; hits 0 and T exactly."""

    t0: float
    t1: float
    h: float

    def __post_init__(self):
        t0 = float(self.t0)
        t1 = float(self.t1)
        h = float(self.h)
        if not (np.isfinite(t0) and np.isfinite(t1) and np.isfinite(h)):
            raise ValidationError("grid endpoints and step must be finite")
        if h <= 0:
            raise ValidationError(f"step h must be positive, got {h!r}")
        if t0 > 0:
            raise ValidationError(f"t0 must be <= 0, got {t0!r}")
        if t1 <= 0:
            raise ValidationError(f"t1 must be positive, got {t1!r}")
        b = -t0
        for name, span in (("b", b), ("T", t1)):
            k = round(span / h)
            if abs(k * h - span) > _GRID_TOL:
                raise ValidationError(
                    f"step h={h!r} does not divide {name}={span!r} within {_GRID_TOL}")
        object.__setattr__(self, "t0", t0)
        object.__setattr__(self, "t1", t1)
        object.__setattr__(self, "h", h)

    @property
    def b(self) -> float:
        return -self.t0

    @property
    def T(self) -> float:
        return self.t1

    @property
    def n_steps(self) -> int:
        return round((self.t1 - self.t0) / self.h)

    @property
    def zero_index(self) -> int:
        return round(self.b / self.h)

    @property
    def forward_steps(self) -> int:
        """Number of steps on [0, T]."""
        return self.n_steps - self.zero_index

    @functools.cached_property
    def times(self) -> np.ndarray:
        t = self.t0 + self.h * np.arange(self.n_steps + 1)
        t.setflags(write=False)
        return t

    @functools.cached_property
    def forward_times(self) -> np.ndarray:
        t = self.times[self.zero_index:]
        t.setflags(write=False)
        return t


@dataclasses.dataclass(frozen=True)
class DelayLaw:
    """Response-delay distribution on [a, b], 0 <= a <= b.

    Kinds: degenerate (point mass), discrete (finite atoms), continuous
    (currently uniform, with exact CDF).
    """

    kind: str
    a: float
    b: float
    atoms: tuple = ()
    probs: tuple = ()
    name: str = ""

    def __post_init__(self):
        a = float(self.a)
        b = float(self.b)
        if not (np.isfinite(a) and np.isfinite(b)) or a < 0 or b < a:
            raise ValidationError(f"delay bounds must satisfy 0 <= a <= b, got ({a!r}, {b!r})")
        if self.kind == "degenerate":
            if a != b:
                raise ValidationError("degenerate law needs a == b")
        elif self.kind == "discrete":
            atoms = tuple(float(x) for x in self.atoms)
            probs = tuple(float(p) for p in self.probs)
            if len(atoms) == 0 or len(atoms) != len(probs):
                raise ValidationError("discrete law needs matching atoms and probs")
            if any(x2 <= x1 for x1, x2 in zip(atoms, atoms[1:])):
                raise ValidationError("atoms must be strictly increasing")
            if atoms[0] < a - _GRID_TOL or atoms[-1] > b + _GRID_TOL:
                raise ValidationError("atoms must lie within [a, b]")
            if any(p < 0 for p in probs):
                raise ValidationError("probs must be nonnegative")
            if abs(sum(probs) - 1.0) > 1e-12:
                raise ValidationError(f"probs sum to {sum(probs)!r}, not 1")
            object.__setattr__(self, "atoms", atoms)
            object.__setattr__(self, "probs", probs)
        elif self.kind == "continuous":
            if self.name != "uniform":
                raise ValidationError(f"unsupported continuous delay law {self.name!r}")
            if b <= a:
                raise ValidationError("continuous law needs a < b")
        else:
            raise ValidationError(f"unknown delay law kind {self.kind!r}")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @classmethod
    def degenerate(cls, a: float) -> "DelayLaw":
        return cls("degenerate", a, a)

    @classmethod
    def discrete(cls, atoms, probs, bounds=None) -> "DelayLaw":
        atoms = tuple(float(x) for x in atoms)
        if bounds is None:
            bounds = (min(atoms), max(atoms))
        return cls("discrete", bounds[0], bounds[1], atoms=atoms, probs=tuple(probs))

    @classmethod
    def uniform(cls, a: float, b: float) -> "DelayLaw":
        return cls("continuous", a, b, name="uniform")

    def cdf(self, x):
        """Exact CDF evaluated at x (vectorized)."""
        x = np.asarray(x, dtype=float)
        if self.kind == "degenerate":
            return (x >= self.a).astype(float)
        if self.kind == "discrete":
            atoms = np.asarray(self.atoms)
            cum = np.cumsum(self.probs)
            idx = np.searchsorted(atoms, x, side="right")
            out = np.where(idx > 0, cum[np.maximum(idx - 1, 0)], 0.0)
            return out if out.shape else float(out)
        # uniform
        return np.clip((x - self.a) / (self.b - self.a), 0.0, 1.0)

    def quantile(self, u):
        """Inverse CDF for u in [0, 1) (vectorized)."""
        u = np.asarray(u, dtype=float)
        if self.kind == "degenerate":
            return np.full_like(u, self.a) if u.shape else self.a
        if self.kind == "discrete":
            cum = np.cumsum(self.probs)
            idx = np.minimum(np.searchsorted(cum, u, side="right"), len(self.atoms) - 1)
            out = np.asarray(self.atoms)[idx]
            return out if out.shape else float(out)
        out = self.a + (self.b - self.a) * u
        return out if out.shape else float(out)


# ---------------------------------------------------------------------------
# coefficients

_COST_KEYS = {
    "cost0_const", "cost0_state", "cost0_control", "cost0_track", "cost0_terminal",
    "cost1_const", "cost1_state", "cost1_control", "cost1_track", "cost1_terminal",
}

_FAMILY_KEYS = {
    "linear_quadratic": {
        "a0", "b0", "k0", "s0", "s0_x", "s0_v",
        "a1", "b1", "k1", "s1", "s1_x", "s1_v",
    } | _COST_KEYS,
    "linear_in_measure": {
        "kernel", "k0", "ks0", "a0", "b0", "s0", "s0_x", "s0_v",
        "k1", "ks1", "a1", "b1", "s1", "s1_x", "s1_v",
    } | _COST_KEYS,
    "smooth_nonlinear": {
        "a0", "t0", "b0", "k0", "s0", "s0_x", "s0_v",
        "a1", "t1", "b1", "k1", "s1", "s1_x", "s1_v",
    } | _COST_KEYS,
}


def _sqnorm(x):
    return np.sum(np.asarray(x, float) ** 2, axis=-1)


@dataclasses.dataclass(frozen=True)
class CoefficientSet:
    """Drift/diffusion/cost coefficients of one of three named families.

    All numeric parameters are scalars applied componentwise; the measure
    argument enters only through the declared features (mean, second_moment,
    tanh_mean), which keeps every family W2-Lipschitz on bounded sets by
    construction.
    """

    family: str
    params: dict
    lipschitz_L: float
    measure_features: tuple = ()

    def __post_init__(self):
        if self.family not in _FAMILY_KEYS:
            raise ParameterError(f"unknown coefficient family {self.family!r}")
        params = dict(self.params)
        unknown = set(params) - _FAMILY_KEYS[self.family]
        if unknown:
            raise ParameterError(
                f"unknown parameters for family {self.family!r}: {sorted(unknown)}")
        for key, val in params.items():
            if key == "kernel":
                continue
            val = float(val)
            if not np.isfinite(val):
                raise ParameterError(f"parameter {key!r} must be finite")
            params[key] = val
        L = float(self.lipschitz_L)
        if not np.isfinite(L) or L <= 0:
            raise ParameterError(f"lipschitz_L must be positive, got {L!r}")
        feats = tuple(self.measure_features)
        for name in feats:
            if name not in FEATURE_NAMES:
                raise ParameterError(f"unknown measure feature {name!r}")
        if self.family == "linear_in_measure":
            kernel = params.get("kernel", "mean")
            if kernel not in ("mean", "tanh_mean"):
                raise ParameterError(f"kernel must be mean or tanh_mean, got {kernel!r}")
            if any(params.get(k, 0.0) != 0.0 for k in ("k0", "ks0", "k1", "ks1")) \
                    and kernel not in feats:
                raise ParameterError(
                    f"kernel feature {kernel!r} must be declared in measure_features")
            params["kernel"] = kernel
        else:
            if any(params.get(k, 0.0) != 0.0 for k in ("k0", "k1")) \
                    and "mean" not in feats:
                raise ParameterError("mean feature required when k0/k1 are nonzero")
        if any(params.get(k, 0.0) != 0.0 for k in ("cost0_track", "cost1_track")) \
                and "mean" not in feats:
            raise ParameterError("mean feature required when cost tracking is enabled")
        object.__setattr__(self, "params", MappingProxyType(params))
        object.__setattr__(self, "lipschitz_L", L)
        object.__setattr__(self, "measure_features", feats)

    def _p(self, key):
        return self.params.get(key, 0.0)

    def _measure_term(self, feats, gain_key):
        gain = self._p(gain_key)
        if gain == 0.0:
            return 0.0
        if self.family == "linear_in_measure":
            return gain * feats[self.params["kernel"]]
        if self.family == "smooth_nonlinear":
            return gain * np.tanh(feats["mean"])
        return gain * feats["mean"]

    def g0(self, x0, feats, v0):
        out = self._p("a0") * x0 + self._p("b0") * v0 + self._measure_term(feats, "k0")
        if self.family == "smooth_nonlinear":
            out = out + self._p("t0") * np.tanh(x0)
        return out

    def sigma0(self, x0, feats, v0):
        state = np.tanh(x0) if self.family == "smooth_nonlinear" else x0
        out = self._p("s0") + self._p("s0_x") * state + self._p("s0_v") * v0
        if self.family == "linear_in_measure":
            out = out + self._measure_term(feats, "ks0")
        return out * np.ones_like(x0)

    def g1(self, x1, feats, v1):
        out = self._p("a1") * x1 + self._p("b1") * v1 + self._measure_term(feats, "k1")
        if self.family == "smooth_nonlinear":
            out = out + self._p("t1") * np.tanh(x1)
        return out

    def sigma1(self, x1, feats, v1):
        state = np.tanh(x1) if self.family == "smooth_nonlinear" else x1
        out = self._p("s1") + self._p("s1_x") * state + self._p("s1_v") * v1
        if self.family == "linear_in_measure":
            out = out + self._measure_term(feats, "ks1")
        return out * np.ones_like(x1)

    def f0(self, x0, feats, v0):
        out = self._p("cost0_const") + self._p("cost0_state") * _sqnorm(x0) \
            + self._p("cost0_control") * _sqnorm(v0)
        if self._p("cost0_track") != 0.0:
            out = out + self._p("cost0_track") * _sqnorm(x0 - feats["mean"])
        return out

    def h0(self, x0, feats):
        return self._p("cost0_terminal") * _sqnorm(x0)

    def f1(self, x1, feats, v1):
        out = self._p("cost1_const") + self._p("cost1_state") * _sqnorm(x1) \
            + self._p("cost1_control") * _sqnorm(v1)
        if self._p("cost1_track") != 0.0:
            out = out + self._p("cost1_track") * _sqnorm(x1 - feats["mean"])
        return out

    def h1(self, x1, feats):
        return self._p("cost1_terminal") * _sqnorm(x1)


def _phi_block(name, X):
    """Kernel values of one feature block at follower states X (..., n1)."""
    if name == "mean":
        return X
    if name == "second_moment":
        return np.sum(X * X, axis=-1, keepdims=True)
    if name == "tanh_mean":
        return np.tanh(X)
    raise ParameterError(f"unknown measure feature {name!r}")


def follower_feature_arrays(X, names):
    """Full and leave-one-out empirical feature averages.

    X: (N, n1) current follower states.  Returns (full, loo) dicts,
    full[name]: (k,), loo[name]: (N, k).  Totals are accumulated through a
    sorted sum so they are bit-identical under follower relabeling.
    """
    N = X.shape[0]
    full, loo = {}, {}
    for name in names:
        phi = _phi_block(name, X)
        total = exact_sum(phi, axis=0)
        full[name] = total / N
        loo[name] = (total[None, :] - phi) / (N - 1)
    return full, loo


def features_of_measure(mu: DiscreteMeasure, names):
    """Feature averages of a weighted discrete measure."""
    out = {}
    for name in names:
        phi = _phi_block(name, mu.points)
        out[name] = mu.weights @ phi
    return out


def features_of_points(points, names):
    """Feature averages of a uniform particle cloud (K, n1)."""
    K = points.shape[0]
    out = {}
    for name in names:
        out[name] = exact_sum(_phi_block(name, points), axis=0) / K
    return out


# ---------------------------------------------------------------------------
# policies

_POLICY_FAMILIES = ("zero", "constant", "affine", "custom")


@dataclasses.dataclass(frozen=True)
class Policy:
    """One control law from a named family.

    affine leader: v0 = gain * x0 + offset.
    affine follower: v1 = gain * x1 + gain_lead * x0(t - delta) + offset.
    custom carries a callable under params["fn"] (tests only, not
    serializable).
    """

    family: str
    params: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        if self.family not in _POLICY_FAMILIES:
            raise ParameterError(f"unknown policy family {self.family!r}")
        params = dict(self.params)
        if self.family == "custom" and not callable(params.get("fn")):
            raise ParameterError("custom policy needs a callable under params['fn']")
        allowed = {
            "zero": set(),
            "constant": {"value"},
            "affine": {"gain", "gain_lead", "offset"},
            "custom": {"fn"},
        }[self.family]
        unknown = set(params) - allowed
        if unknown:
            raise ParameterError(
                f"unknown parameters for policy family {self.family!r}: {sorted(unknown)}")
        object.__setattr__(self, "params", MappingProxyType(params))


@dataclasses.dataclass(frozen=True)
class PolicySet:
    """Leader and follower control laws plus the declared delay-Holder
    constant of the follower law."""

    leader: Policy
    follower: Policy
    holder_l: float = 1.0

    def __post_init__(self):
        if not np.isfinite(float(self.holder_l)) or float(self.holder_l) < 0:
            raise ParameterError("holder_l must be a nonnegative real")

    def leader_value(self, t, x0, feats, p0):
        pol = self.leader
        if pol.family == "zero":
            return np.zeros(p0)
        if pol.family == "constant":
            return np.full(p0, float(pol.params["value"]))
        if pol.family == "affine":
            return pol.params.get("gain", 0.0) * x0 + pol.params.get("offset", 0.0)
        return np.asarray(pol.params["fn"](t, x0, feats), dtype=float)

    def follower_value(self, t, x1, feats, x0_delayed, deltas, p1):
        pol = self.follower
        lead_shape = x1.shape[:-1] + (p1,)
        if pol.family == "zero":
            return np.zeros(lead_shape)
        if pol.family == "constant":
            return np.full(lead_shape, float(pol.params["value"]))
        if pol.family == "affine":
            return (pol.params.get("gain", 0.0) * x1
                    + pol.params.get("gain_lead", 0.0) * x0_delayed
                    + pol.params.get("offset", 0.0))
        return np.asarray(pol.params["fn"](t, x1, feats, x0_delayed, deltas),
                          dtype=float)


# ---------------------------------------------------------------------------
# model

_INIT_PATH_FAMILIES = ("constant", "ou_path", "scaled_brownian")
_INIT_STATE_FAMILIES = ("constant", "normal", "student_t")


@dataclasses.dataclass(frozen=True)
class ModelSpec:
    """Coefficients, dimensions, grid, initial conditions, and the declared
    moment order q of the initial data."""

    coefficients: CoefficientSet
    grid: TimeGrid
    n0: int = 1
    n1: int = 1
    p0: int = 1
    p1: int = 1
    q: float = 6.0
    leader_init: dict = None
    follower_init: dict = None

    def __post_init__(self):
        for name in ("n0", "n1", "p0", "p1"):
            val = getattr(self, name)
            if not isinstance(val, int) or val < 1:
                raise ParameterError(f"{name} must be a positive integer, got {val!r}")
        if not np.isfinite(float(self.q)) or float(self.q) < 2:
            raise ParameterError(f"q must be >= 2, got {self.q!r}")
        leader_init = self.leader_init or {"family": "constant", "params": {"value": 0.0}}
        follower_init = self.follower_init or {"family": "constant", "params": {"value": 0.0}}
        if leader_init.get("family") not in _INIT_PATH_FAMILIES:
            raise ParameterError(
                f"unknown leader initial-path family {leader_init.get('family')!r}")
        if follower_init.get("family") not in _INIT_STATE_FAMILIES:
            raise ParameterError(
                f"unknown follower initial family {follower_init.get('family')!r}")
        object.__setattr__(self, "leader_init", MappingProxyType(dict(leader_init)))
        object.__setattr__(self, "follower_init", MappingProxyType(dict(follower_init)))


@dataclasses.dataclass(frozen=True)
class TrajectoryBundle:
    """One N-player replication: leader path on [-b, T], follower paths on
    [0, T], applied delays, controls, and seed provenance."""

    grid: TimeGrid
    leader_path: np.ndarray
    follower_paths: np.ndarray
    delays: np.ndarray
    noise_seeds: tuple
    controls_applied: dict

    def __post_init__(self):
        lead = np.asarray(self.leader_path, dtype=float)
        fol = np.asarray(self.follower_paths, dtype=float)
        if lead.ndim != 2 or lead.shape[0] != self.grid.n_steps + 1:
            raise DimensionError(f"leader path shape {lead.shape}")
        if fol.ndim != 3 or fol.shape[1] != self.grid.forward_steps + 1:
            raise DimensionError(f"follower paths shape {fol.shape}")
        if not np.all(np.isfinite(lead)) or not np.all(np.isfinite(fol)):
            raise ValidationError("non-finite state in trajectory bundle")
        delays = np.asarray(self.delays, dtype=float)
        if delays.shape != (fol.shape[0],):
            raise DimensionError("one delay per follower required")
        object.__setattr__(self, "leader_path", lead)
        object.__setattr__(self, "follower_paths", fol)
        object.__setattr__(self, "delays", delays)

    @property
    def N(self) -> int:
        return self.follower_paths.shape[0]


# ---------------------------------------------------------------------------
# sampling

def _as_generator(seed, *key):
    if isinstance(seed, np.random.Generator):
        return seed
    return generator(int(seed), *key)


def sample_initial_leader_path(grid: TimeGrid, family: str, params: dict, seed):
    """Initial leader segment on [-b, 0], shape (zero_index + 1, dim).

    Families: constant (flat), ou_path (exact OU transitions, so zero
    volatility gives the exact exponential decay), scaled_brownian
    (increment variance sigma^2 h per step by construction).
    """
    if family not in _INIT_PATH_FAMILIES:
        raise ParameterError(f"unknown initial-path family {family!r}")
    params = dict(params)
    dim = int(params.pop("dim", 1))
    if dim < 1:
        raise ParameterError("dim must be a positive integer")
    rng = _as_generator(seed, LEADER_INIT)
    m = grid.zero_index
    out = np.empty((m + 1, dim))
    if family == "constant":
        value = np.broadcast_to(np.asarray(params.pop("value", 0.0), float), (dim,))
        if params:
            raise ParameterError(f"unknown params {sorted(params)} for constant family")
        out[:] = value
        return out
    if family == "scaled_brownian":
        sigma = float(params.pop("sigma", 1.0))
        start = np.broadcast_to(np.asarray(params.pop("start", 0.0), float), (dim,))
        if params:
            raise ParameterError(f"unknown params {sorted(params)} for scaled_brownian")
        if sigma < 0:
            raise ParameterError("sigma must be nonnegative")
        incr = sigma * math.sqrt(grid.h) * rng.standard_normal((m, dim))
        out[0] = start
        out[1:] = start + np.cumsum(incr, axis=0)
        return out
    # ou_path
    theta = float(params.pop("theta", 1.0))
    mean = np.broadcast_to(np.asarray(params.pop("mean", 0.0), float), (dim,))
    vol = float(params.pop("vol", 1.0))
    start = np.broadcast_to(np.asarray(params.pop("start", 0.0), float), (dim,))
    if params:
        raise ParameterError(f"unknown params {sorted(params)} for ou_path")
    if theta <= 0:
        raise ParameterError("theta must be positive")
    if vol < 0:
        raise ParameterError("vol must be nonnegative")
    decay = math.exp(-theta * grid.h)
    stat_sd = vol * math.sqrt((1.0 - decay * decay) / (2.0 * theta))
    out[0] = start
    x = np.array(start, dtype=float)
    for k in range(m):
        x = mean + (x - mean) * decay + stat_sd * rng.standard_normal(dim)
        out[k + 1] = x
    return out


def draw_follower_initial(spec: dict, rng, n1: int, size=None):
    """Draw follower initial states; shape (n1,) or (size, n1)."""
    family = spec.get("family")
    params = dict(spec.get("params", {}))
    shape = (n1,) if size is None else (size, n1)
    if family == "constant":
        return np.broadcast_to(
            np.asarray(params.get("value", 0.0), float), shape).copy()
    if family == "normal":
        return params.get("loc", 0.0) + params.get("scale", 1.0) \
            * rng.standard_normal(shape)
    if family == "student_t":
        df = float(params.get("df", 5.0))
        if df <= 2:
            raise ParameterError("student_t needs df > 2")
        return params.get("loc", 0.0) + params.get("scale", 1.0) \
            * rng.standard_t(df, size=shape)
    raise ParameterError(f"unknown follower initial family {family!r}")


def _draw_delay(law: DelayLaw, rng) -> float:
    if law.kind == "degenerate":
        return law.a
    return float(law.quantile(rng.random()))


def sample_delays(law: DelayLaw, N: int, seed) -> np.ndarray:
    """N i.i.d. draws from the delay law.

    With a SharedNoise seed each follower draws from its own stream, which
    makes the draws permutation-equivariant under relabeling.
    """
    if N < 1:
        raise ValidationError("N must be at least 1")
    if isinstance(seed, SharedNoise):
        return np.array([_draw_delay(law, seed.delay(i)) for i in range(N)])
    rng = _as_generator(seed, DELAY)
    if law.kind == "degenerate":
        return np.full(N, law.a)
    return np.asarray(law.quantile(rng.random(N)), dtype=float)


def snap_delays_to_grid(delays, grid: TimeGrid) -> np.ndarray:
    """Round each delay to the nearest grid multiple; idempotent."""
    delays = np.asarray(delays, dtype=float)
    return np.round(delays / grid.h) * grid.h


# ---------------------------------------------------------------------------
# simulation

def simulate_nplayer(model: ModelSpec, policies: PolicySet, N: int,
                     delay_law: DelayLaw, seed,
                     _noise_overrides: dict | None = None) -> TrajectoryBundle:
    """Explicit Euler simulation of the leader and N delayed followers.

    seed: integer master seed or a SharedNoise.  Increments are
    drift * h + diffusion * sqrt(h) * zeta with left-endpoint coefficients;
    interaction features are recomputed each step, leave-one-out for
    followers and full-population for the leader.
    """
    if N < 2:
        raise ValidationError(f"need at least 2 followers, got {N}")
    if delay_law.b > model.grid.b + _GRID_TOL:
        raise ValidationError(
            f"delay bound {delay_law.b!r} exceeds grid history b={model.grid.b!r}")
    noise = seed if isinstance(seed, SharedNoise) else SharedNoise(int(seed))
    ov = _noise_overrides or {}
    grid = model.grid
    h = grid.h
    sqrt_h = math.sqrt(h)
    m = grid.forward_steps
    z0 = grid.zero_index
    coeffs = model.coefficients
    names = coeffs.measure_features

    init_params = dict(model.leader_init.get("params", {}))
    init_params.setdefault("dim", model.n0)
    xi0 = ov.get("leader_init_path")
    if xi0 is None:
        xi0 = sample_initial_leader_path(
            grid, model.leader_init["family"], init_params, noise.leader_init())
    leader_path = np.empty((grid.n_steps + 1, model.n0))
    leader_path[:z0 + 1] = xi0

    X = ov.get("follower_init")
    if X is None:
        X = np.stack([
            draw_follower_initial(model.follower_init, noise.follower_init(i), model.n1)
            for i in range(N)])
    else:
        X = np.array(X, dtype=float)

    delays = ov.get("delays")
    if delays is None:
        delays = sample_delays(delay_law, N, noise)
    delays = snap_delays_to_grid(delays, grid)
    lags = np.round(delays / h).astype(int)

    zeta0 = ov.get("leader_noise")
    if zeta0 is None:
        zeta0 = noise.leader_noise().standard_normal((m, model.n0))
    zeta1 = ov.get("follower_noise")
    if zeta1 is None:
        zeta1 = np.stack([
            noise.follower_noise(i).standard_normal((m, model.n1))
            for i in range(N)])

    follower_paths = np.empty((N, m + 1, model.n1))
    follower_paths[:, 0, :] = X
    controls_leader = np.empty((m, model.p0))
    controls_followers = np.empty((N, m, model.p1))
    x0 = np.array(leader_path[z0], dtype=float)
    X = np.array(X, dtype=float)

    # overflow during coefficient evaluation is caught by the explosion guard
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(m):
            g = z0 + k
            t = grid.times[g]
            full, loo = follower_feature_arrays(X, names)
            x0_delayed = leader_path[g - lags, :]
            u0 = np.asarray(policies.leader_value(t, x0, full, model.p0), dtype=float)
            v1 = np.asarray(
                policies.follower_value(t, X, loo, x0_delayed, delays, model.p1),
                dtype=float)
            if v1.shape != (N, model.p1):
                v1 = np.broadcast_to(v1, (N, model.p1)).copy()
            controls_leader[k] = u0
            controls_followers[:, k, :] = v1
            x0 = x0 + coeffs.g0(x0, full, u0) * h \
                + coeffs.sigma0(x0, full, u0) * sqrt_h * zeta0[k]
            X = X + coeffs.g1(X, loo, v1) * h \
                + coeffs.sigma1(X, loo, v1) * sqrt_h * zeta1[:, k, :]
            if not (np.all(np.isfinite(x0)) and np.all(np.isfinite(X))):
                raise SimulationDivergedError(
                    k, f"non-finite state at forward step {k} (t={t!r})")
            leader_path[g + 1] = x0
            follower_paths[:, k + 1, :] = X

    return TrajectoryBundle(
        grid=grid,
        leader_path=leader_path,
        follower_paths=follower_paths,
        delays=delays,
        noise_seeds=noise.provenance,
        controls_applied={"leader": controls_leader, "followers": controls_followers},
    )


def evaluate_costs_nplayer(bundle: TrajectoryBundle, model: ModelSpec):
    """Single-replication cost values (J0N, [JiN for each follower]).

    Rectangle rule in time (left endpoints) plus terminal costs; follower
    running costs see leave-one-out features, the leader sees the full
    empirical features.
    """
    coeffs = model.coefficients
    names = coeffs.measure_features
    grid = bundle.grid
    h = grid.h
    m = grid.forward_steps
    z0 = grid.zero_index
    N = bundle.N
    u = bundle.controls_applied["leader"]
    v = bundle.controls_applied["followers"]
    J0 = 0.0
    Ji = np.zeros(N)
    for k in range(m):
        X = bundle.follower_paths[:, k, :]
        full, loo = follower_feature_arrays(X, names)
        x0 = bundle.leader_path[z0 + k]
        J0 += float(coeffs.f0(x0, full, u[k])) * h
        Ji += np.asarray(coeffs.f1(X, loo, v[:, k, :]), dtype=float) * h
    X = bundle.follower_paths[:, m, :]
    full, loo = follower_feature_arrays(X, names)
    J0 += float(coeffs.h0(bundle.leader_path[z0 + m], full))
    Ji += np.asarray(coeffs.h1(X, loo), dtype=float)
    return float(J0), [float(val) for val in Ji]


# ---------------------------------------------------------------------------
# diagnostics

def coefficient_function(coeffs: CoefficientSet, name: str):
    """Wrap one coefficient as a callable (x, measure, v) -> array, with the
    measure reduced to the declared features."""
    fn = getattr(coeffs, name)

    def wrapped(x, mu: DiscreteMeasure, v):
        feats = features_of_measure(mu, coeffs.measure_features)
        return np.atleast_1d(np.asarray(fn(np.asarray(x, float), feats,
                                           np.asarray(v, float)), dtype=float))

    return wrapped


def lipschitz_probe(coefficient, trials: int, radius: float, seed, *,
                    dims=(1, 1, 1)) -> float:
    """Max observed ratio |df| / (|dx| + W2(z, z') + |dv|) over random probes.

    Each trial also varies one argument at a time so a linear coefficient
    c * x reports exactly |c|.  The measure argument distance uses the exact
    LP.
    """
    if trials < 1:
        raise ParameterError("trials must be >= 1")
    if radius <= 0:
        raise ParameterError("radius must be positive")
    rng = _as_generator(seed, PROBE)
    nx, nz, nv = dims
    best = 0.0

    def out(x, mu, v):
        return np.asarray(coefficient(x, mu, v), dtype=float).ravel()

    for _ in range(trials):
        x1 = radius * rng.uniform(-1, 1, nx)
        x2 = radius * rng.uniform(-1, 1, nx)
        v1 = radius * rng.uniform(-1, 1, nv)
        v2 = radius * rng.uniform(-1, 1, nv)
        natoms = int(rng.integers(1, 6))
        z1 = DiscreteMeasure(radius * rng.uniform(-1, 1, (natoms, nz)),
                             rng.dirichlet(np.ones(natoms)))
        natoms = int(rng.integers(1, 6))
        z2 = DiscreteMeasure(radius * rng.uniform(-1, 1, (natoms, nz)),
                             rng.dirichlet(np.ones(natoms)))
        dx = float(np.linalg.norm(x1 - x2))
        dv = float(np.linalg.norm(v1 - v2))
        dz = w2_exact_lp(z1, z2)[0]
        base = out(x1, z1, v1)
        if dx > 1e-9:
            best = max(best, float(np.linalg.norm(out(x2, z1, v1) - base)) / dx)
        if dz > 1e-9:
            best = max(best, float(np.linalg.norm(out(x1, z2, v1) - base)) / dz)
        if dv > 1e-9:
            best = max(best, float(np.linalg.norm(out(x1, z1, v2) - base)) / dv)
        denom = dx + dz + dv
        if denom > 1e-9:
            best = max(best, float(np.linalg.norm(out(x2, z2, v2) - base)) / denom)
    return best
