"""Dynamic algorithms and their immersed (target) counterparts.

A dynamic algorithm is a pair of maps ``zeta' = f(zeta, y, w)`` and
``u = g(zeta, y, w)``.  Its target runs on encoded data only:

    zeta~' = pi2 @ f(pi2_left @ zeta~, pi1_left @ y~, w)
    u~     = pi3 @ g(pi2_left @ zeta~, pi1_left @ y~, w) + pi4 @ y~

Starting on the manifold ``zeta~_0 = pi2 @ zeta_0`` keeps the target on it,
so the user decodes the exact utility.  ``w`` is passed in clear and must not
carry private data.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import linalg
from .errors import ConfigError, NumericError, ProtocolError
from .scheme import EncodedUtility, TargetKeys, decode_utility, encode_input

_EMPTY = np.zeros(0)


@dataclass
class DynamicAlgorithm:
    f: Callable
    g: Callable
    zeta0: np.ndarray
    n_y: int
    n_u: int
    n_w: int = 0
    name: str = "algorithm"

    def __post_init__(self):
        self.zeta0 = linalg.as_vector(self.zeta0, name="zeta0")
        if self.n_y < 1 or self.n_u < 1 or self.n_w < 0:
            raise ConfigError("algorithm dims must satisfy n_y, n_u >= 1 and n_w >= 0")

    @property
    def n_zeta(self):
        return self.zeta0.shape[0]

    @property
    def local_steps(self):
        return 1


@dataclass
class TwoScaleAlgorithm(DynamicAlgorithm):
    """One global input triggers ``local_steps`` state updates before ``g``."""

    local_steps: int = 1

    def __post_init__(self):
        super().__post_init__()
        if self.local_steps < 1:
            raise ConfigError(f"local_steps must be >= 1, got {self.local_steps}")


@dataclass(frozen=True)
class ImmersionResidual:
    step: int
    residual: float


@dataclass
class TargetAlgorithm:
    """Cloud-side state machine: embedded keys, wrapped maps, encoded state, step."""

    keys: TargetKeys
    alg: DynamicAlgorithm
    state: np.ndarray
    k: int = 0
    two_scale: bool = False

    @property
    def local_steps(self):
        return self.alg.local_steps if self.two_scale else 1


def _check_dims(alg, keys):
    d = keys.dims
    got = (alg.n_y, alg.n_u, alg.n_zeta)
    want = (d.n_y, d.n_u, d.n_zeta)
    if got != want:
        raise ConfigError(f"algorithm dims (n_y, n_u, n_zeta)={got} do not match scheme {want}")


def _keys_of(scheme_or_keys):
    if isinstance(scheme_or_keys, TargetKeys):
        return scheme_or_keys
    return scheme_or_keys.target_keys()


def build_target(alg, scheme):
    """Wrap ``alg`` for the cloud; accepts a full scheme or just its TargetKeys."""
    keys = _keys_of(scheme)
    _check_dims(alg, keys)
    return TargetAlgorithm(keys, alg, keys.pi2 @ alg.zeta0)


def build_target_two_scale(alg, scheme):
    if not isinstance(alg, TwoScaleAlgorithm):
        raise ConfigError("build_target_two_scale needs a TwoScaleAlgorithm")
    t = build_target(alg, scheme)
    t.two_scale = True
    return t


def _w_vector(w, n_w):
    if w is None:
        w = _EMPTY if n_w == 0 else None
    if w is None:
        raise ConfigError(f"algorithm expects w of dimension {n_w}")
    return linalg.as_vector(w, n_w, "w") if n_w else _EMPTY


def _w_schedule(w, n_w, steps):
    """Per-local-step w as a ``(steps + 1, n_w)`` array (``n_w`` may be 0)."""
    if n_w == 0 and w is None:
        return np.zeros((steps + 1, 0))
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 1 and steps == 1 and w.shape[0] == n_w:
        w = np.vstack([w, w])
    if w.shape != (steps + 1, n_w):
        raise ConfigError(f"w schedule has shape {w.shape}, expected {(steps + 1, n_w)}")
    return w


def _finite(v, what, step, dim):
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.shape[0] != dim:
        raise NumericError(f"{what} returned dimension {v.shape[0]}, expected {dim}", step=step)
    if not np.all(np.isfinite(v)):
        raise NumericError(f"{what} returned non-finite values", step=step)
    return v


def target_step(t, e, w=None):
    """Advance the target by one global step and return the encoded utility."""
    if e.step != t.k:
        raise ProtocolError(f"input for step {e.step} but target expects step {t.k}", step=t.k)
    # Overflow is reported below as a NumericError, not as a warning.
    with np.errstate(over="ignore", invalid="ignore"):
        keys, alg = t.keys, t.alg
        ytilde = linalg.as_vector(e.ytilde, keys.dims.nt_y, "ytilde")
        ybar = keys.pi1_left @ ytilde
        if t.two_scale:
            ws = _w_schedule(w, alg.n_w, alg.local_steps)
            state = t.state
            for i in range(alg.local_steps):
                z = _finite(alg.f(keys.pi2_left @ state, ybar, ws[i]), "f", t.k, alg.n_zeta)
                state = keys.pi2 @ z
            u = _finite(alg.g(keys.pi2_left @ state, ybar, ws[-1]), "g", t.k, alg.n_u)
            next_state = state
        else:
            wv = _w_vector(w, alg.n_w)
            zeta = keys.pi2_left @ t.state
            u = _finite(alg.g(zeta, ybar, wv), "g", t.k, alg.n_u)
            next_state = keys.pi2 @ _finite(alg.f(zeta, ybar, wv), "f", t.k, alg.n_zeta)
        utilde = keys.pi3 @ u + keys.pi4 @ ytilde
        if not np.all(np.isfinite(utilde)) or not np.all(np.isfinite(next_state)):
            raise NumericError("encoded state or utility overflowed", step=t.k)
    out = EncodedUtility(utilde, t.k)
    t.state = next_state
    t.k += 1
    return out


def plain_step(alg, zeta, y, w=None, step=0):
    """One global step of the plain algorithm; returns ``(next_zeta, u)``."""
    if isinstance(alg, TwoScaleAlgorithm):
        ws = _w_schedule(w, alg.n_w, alg.local_steps)
        for i in range(alg.local_steps):
            zeta = _finite(alg.f(zeta, y, ws[i]), "f", step, alg.n_zeta)
        return zeta, _finite(alg.g(zeta, y, ws[-1]), "g", step, alg.n_u)
    wv = _w_vector(w, alg.n_w)
    u = _finite(alg.g(zeta, y, wv), "g", step, alg.n_u)
    return _finite(alg.f(zeta, y, wv), "f", step, alg.n_zeta), u


def _split_inputs(inputs, n_y):
    for item in inputs:
        if isinstance(item, tuple):
            y, w = item
        else:
            y, w = item, None
        yield linalg.as_vector(y, n_y, "y"), w


def run_reference(alg, inputs):
    """Run the plain algorithm; returns ``(states (K+1, n_zeta), utilities (K, n_u))``.

    ``inputs`` yields ``(y, w)`` pairs or bare ``y`` vectors.
    """
    zeta = alg.zeta0.copy()
    states, utils = [zeta], []
    for k, (y, w) in enumerate(_split_inputs(inputs, alg.n_y)):
        zeta, u = plain_step(alg, zeta, y, w, k)
        states.append(zeta)
        utils.append(u)
    return np.array(states), np.array(utils).reshape(len(utils), alg.n_u)


@dataclass
class LockstepRun:
    plain_states: np.ndarray
    target_states: np.ndarray
    plain_utilities: np.ndarray
    decoded_utilities: np.ndarray
    residuals: list

    @property
    def max_utility_error(self):
        if self.plain_utilities.size == 0:
            return 0.0
        return float(np.max(np.abs(self.plain_utilities - self.decoded_utilities)))


def run_lockstep(alg, scheme, inputs, rng):
    """Run plain and target side by side, encoding each input with ``rng``."""
    two = isinstance(alg, TwoScaleAlgorithm)
    target = build_target_two_scale(alg, scheme) if two else build_target(alg, scheme)
    zeta = alg.zeta0.copy()
    ps, ts = [zeta], [target.state.copy()]
    pu, du = [], []
    res = [ImmersionResidual(0, float(np.max(np.abs(target.state - scheme.pi2 @ zeta))))]
    for k, (y, w) in enumerate(_split_inputs(inputs, alg.n_y)):
        e = encode_input(scheme, y, rng, step=k)
        eu = target_step(target, e, w)
        zeta, u = plain_step(alg, zeta, y, w, k)
        ps.append(zeta)
        ts.append(target.state.copy())
        pu.append(u)
        du.append(decode_utility(scheme, eu, e))
        res.append(ImmersionResidual(k + 1, float(np.max(np.abs(target.state - scheme.pi2 @ zeta)))))
    n = len(pu)
    return LockstepRun(np.array(ps), np.array(ts), np.array(pu).reshape(n, alg.n_u),
                       np.array(du).reshape(n, alg.n_u), res)


def immersion_residuals(alg, scheme, inputs, rng=None):
    """Off-manifold error ``max|zeta~_k - pi2 @ zeta_k|`` for k = 0..K."""
    rng = rng if rng is not None else np.random.default_rng(0)
    return run_lockstep(alg, scheme, inputs, rng).residuals


def write_trajectory_csv(path, rows, prefix="x"):
    """Write a ``(K, n)`` array as CSV with columns ``step, prefix_0..prefix_{n-1}``."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step"] + [f"{prefix}_{i}" for i in range(rows.shape[1])])
        for k, r in enumerate(rows):
            w.writerow([k] + [repr(float(v)) for v in r])


# Named algorithms, so both ends of a session can build the same maps
# from a short identifier.

def echo_algorithm(n_y=1, **_):
    """Holds a dummy state and returns its input: u = y."""
    return DynamicAlgorithm(lambda z, y, w: z, lambda z, y, w: y.copy(),
                            np.zeros(1), n_y, n_y, name="echo")


def linear_algorithm(n_y=1, n_u=1, n_zeta=2, seed=0, radius=0.9, **_):
    """Random stable linear system ``zeta' = A zeta + B y, u = C zeta + D y``."""
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n_zeta, n_zeta))
    a *= radius / max(np.max(np.abs(np.linalg.eigvals(a))), 1e-12)
    b = rng.standard_normal((n_zeta, n_y))
    c = rng.standard_normal((n_u, n_zeta))
    d = rng.standard_normal((n_u, n_y))
    zeta0 = rng.standard_normal(n_zeta)
    return DynamicAlgorithm(lambda z, y, w: a @ z + b @ y, lambda z, y, w: c @ z + d @ y,
                            zeta0, n_y, n_u, name="linear")


def reactor_algorithm(dt=0.1, **_):
    from .casestudy_control import ReactorParams, controller_algorithm

    return controller_algorithm(ReactorParams(dt=dt))


ALGORITHMS = {
    "echo": echo_algorithm,
    "linear": linear_algorithm,
    "reactor": reactor_algorithm,
}


def get_algorithm(name, **params):
    try:
        factory = ALGORITHMS[name]
    except KeyError:
        raise ConfigError(f"unknown algorithm {name!r}; choose from {sorted(ALGORITHMS)}") from None
    return factory(**params)
