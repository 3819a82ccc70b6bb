"""Delayed-recycle two-stage reactor under adaptive output feedback.

Plant right-hand sides (x1_tau is the delayed first state):

    F1 = -(1/theta1 + k1) x1 + (1 - R2)/V1 x2 + vt1 sin(t) x1_tau^2
    F2 = -(1/theta2 + k2) x1 + R1/V2 x1_tau + F2/V2 u + vt2 sin(t) x1_tau^3 + vt3 x2

with delay d(t) = 0.5 (3 + sin t).  With ``dt`` set (the default) these are
vector fields sampled by forward Euler, ``x <- x + dt F``, and the controller
is discretised the same way.  With ``dt=None`` the right-hand sides are used
verbatim as the next state; that map diverges within a few steps from the
nominal initial condition and the run aborts with a NumericError.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .algorithm import DynamicAlgorithm
from .errors import ControllerDomainError, NumericError
from .scheme import SchemeDims, keygen_preset

REACTOR_DIMS = SchemeDims(n_y=1, n_u=1, n_zeta=3, nt_y=3, nt_u=3, nt_zeta=4)


@dataclass(frozen=True)
class ReactorParams:
    theta1: float = 2.0
    theta2: float = 2.0
    k1: float = 0.3
    k2: float = 0.3
    R1: float = 0.5
    R2: float = 0.5
    V1: float = 0.5
    V2: float = 0.5
    F2: float = 0.5
    vartheta: tuple = (1.0, 1.0, -1.0)
    x0: tuple = (-0.5, 2.0)
    dt: float | None = 0.1

    def __post_init__(self):
        for name in ("V1", "V2", "F2", "theta1", "theta2"):
            if getattr(self, name) == 0:
                raise ValueError(f"{name} must be nonzero")
        if self.dt is not None and not self.dt > 0:
            raise ValueError("dt must be positive or None")

    def delay(self, t):
        return 0.5 * (3.0 + math.sin(t))

    def time(self, k):
        return k * self.dt if self.dt is not None else float(k)


@dataclass
class ReactorState:
    x1: float
    x2: float
    history: list = field(default_factory=list)
    k: int = 0

    @classmethod
    def initial(cls, params):
        x1, x2 = params.x0
        return cls(float(x1), float(x2), [float(x1)])

    def as_vector(self):
        return np.array([self.x1, self.x2])


def delayed_index(params, k):
    """History index of x1 at time t_k - d(t_k), rounded and clamped to >= 0."""
    t = params.time(k)
    h = params.dt if params.dt is not None else 1.0
    return min(k, max(0, int(round((t - params.delay(t)) / h))))


def reactor_rhs(params, x1, x2, x1_tau, u, t):
    v1, v2, v3 = params.vartheta
    s = math.sin(t)
    f1 = -(1.0 / params.theta1 + params.k1) * x1 + (1.0 - params.R2) / params.V1 * x2 \
        + v1 * s * x1_tau ** 2
    f2 = (-(1.0 / params.theta2 + params.k2) * x1 + params.R1 / params.V2 * x1_tau
          + params.F2 / params.V2 * u + v2 * s * x1_tau ** 3 + v3 * x2)
    return f1, f2


def reactor_step(state, params, u, k=None):
    """Advance the plant one step; returns ``(new_state, y)`` with ``y = x1``."""
    k = state.k if k is None else k
    x1_tau = state.history[delayed_index(params, k)]
    try:
        f1, f2 = reactor_rhs(params, state.x1, state.x2, x1_tau, float(u), params.time(k))
    except OverflowError:
        raise NumericError("reactor state overflowed", step=k) from None
    if params.dt is None:
        x1, x2 = f1, f2
    else:
        x1, x2 = state.x1 + params.dt * f1, state.x2 + params.dt * f2
    if not (math.isfinite(x1) and math.isfinite(x2)):
        raise NumericError("reactor state is not finite", step=k)
    new = ReactorState(x1, x2, state.history + [x1], k + 1)
    return new, x1


@dataclass(frozen=True)
class ControllerState:
    z_hat: float = 0.0
    r: float = 1.0
    l: float = 1.0

    def as_vector(self):
        return np.array([self.z_hat, self.r, self.l])


@dataclass(frozen=True)
class ControllerTerms:
    rho: float
    zeta_aux: float
    delta: float
    m: float
    u: float


def controller_terms(z_hat, r, l, y, step=None):
    if not r > 0:
        raise ControllerDomainError(f"controller gain r = {r!r} must be positive", step=step)
    rho = (0.1 + y * y) ** 2 + 1.01
    v = z_hat + r * y + l * rho * y
    zeta_aux = v / math.sqrt(r)
    y2 = y * y
    q = 1.02 + 0.2 * y2 + y2 * y2
    delta = (2.0 * (2.0 * l * l + l ** 4 * q)
             * (1.0404 + 1.224 * y2 + 10.56 * y2 ** 2 + 6.0 * y2 ** 3 + 25.0 * y2 ** 4)
             + 4.0 * y2 * y2 * q ** 4)
    # One evaluation shared by the z_hat and r laws.
    m = max(r * delta - r * r, rho * y2 + zeta_aux ** 2)
    return ControllerTerms(rho, zeta_aux, delta, m, -r * v)


def controller_rhs(zeta, y, step=None):
    """Update-law right-hand side and control for state ``[z_hat, r, l]``."""
    z_hat, r, l = (float(c) for c in zeta)
    y = float(y)
    try:
        t = controller_terms(z_hat, r, l, y, step)
        dz = t.u - r * z_hat - r * r * y - t.m * y
    except OverflowError:
        raise NumericError("controller terms overflowed", step=step) from None
    return np.array([dz, t.m, t.rho * y * y]), t.u


def controller_step(cstate, y, k=None, dt=0.1):
    """Returns ``(next ControllerState, u)``; ``dt=None`` applies the laws verbatim."""
    zeta = cstate.as_vector()
    rhs, u = controller_rhs(zeta, y, k)
    nxt = rhs if dt is None else zeta + dt * rhs
    if not np.all(np.isfinite(nxt)) or not math.isfinite(u):
        raise NumericError("controller state is not finite", step=k)
    return ControllerState(*nxt), u


def controller_algorithm(params=None, cstate0=None):
    """The controller as a dynamic algorithm with state ``[z_hat, r, l]``."""
    params = params or ReactorParams()
    dt = params.dt
    zeta0 = (cstate0 or ControllerState()).as_vector()

    def f(zeta, y, w):
        rhs, _ = controller_rhs(zeta, y[0])
        return rhs if dt is None else zeta + dt * rhs

    def g(zeta, y, w):
        return np.array([controller_rhs(zeta, y[0])[1]])

    return DynamicAlgorithm(f, g, zeta0, 1, 1, name="reactor")


@dataclass
class Trajectory:
    mode: str
    x: np.ndarray
    y: np.ndarray
    u: np.ndarray
    zeta: np.ndarray
    step_time_s: np.ndarray
    ytilde: np.ndarray = None
    utilde: np.ndarray = None
    zeta_tilde: np.ndarray = None
    residuals: np.ndarray = None

    @property
    def steps(self):
        return self.u.shape[0]


def run_closed_loop(params=None, steps=100, mode="plain", scheme=None, transport=None,
                    service=None, seed=0):
    """Simulate the loop for ``steps`` steps.

    ``plain`` runs plant and controller directly.  ``encoded`` sends each
    measurement through a protocol session (an in-process cloud unless a
    ``transport`` is given) and drives the plant with the decoded control.
    A plain controller fed the same measurements is run alongside to record
    the immersion residual, when the cloud's state is observable.
    """
    from .protocol import Channel, ClientSession, CloudService, LoopbackTransport

    params = params or ReactorParams()
    ps = ReactorState.initial(params)
    xs, ys, us, times = [ps.as_vector()], [], [], []
    cs = ControllerState()
    zs = [cs.as_vector()]
    if mode == "plain":
        for k in range(steps):
            t0 = time.perf_counter()
            y = ps.x1
            cs, u = controller_step(cs, y, k, params.dt)
            ps, _ = reactor_step(ps, params, u, k)
            times.append(time.perf_counter() - t0)
            ys.append(y)
            us.append(u)
            xs.append(ps.as_vector())
            zs.append(cs.as_vector())
        return Trajectory("plain", np.array(xs), np.array(ys), np.array(us), np.array(zs),
                          np.array(times))
    if mode != "encoded":
        raise ValueError(f"mode must be 'plain' or 'encoded', got {mode!r}")

    scheme = scheme or keygen_preset(REACTOR_DIMS, "balanced", seed=seed)
    if transport is None:
        service = service or CloudService(scheme.target_keys())
        transport = LoopbackTransport(service)
    client = ClientSession(scheme, seed=seed)
    ch = Channel(client, transport)
    ch.open("reactor", {"dt": params.dt})
    target = None
    if service is not None:
        target = service.sessions[client.session_id].target
    yts, uts, zts, res = [], [], [], []
    if target is not None:
        zts.append(target.state.copy())
        res.append(float(np.max(np.abs(target.state - scheme.pi2 @ cs.as_vector()))))
    for k in range(steps):
        t0 = time.perf_counter()
        y = ps.x1
        u = float(ch.step(np.array([y]))[0])
        ps, _ = reactor_step(ps, params, u, k)
        times.append(time.perf_counter() - t0)
        cs, _ = controller_step(cs, y, k, params.dt)
        ys.append(y)
        us.append(u)
        xs.append(ps.as_vector())
        zs.append(cs.as_vector())
        yts.append(ch.last_ytilde)
        uts.append(ch.last_utilde)
        if target is not None:
            zts.append(target.state.copy())
            res.append(float(np.max(np.abs(target.state - scheme.pi2 @ cs.as_vector()))))
    ch.close()
    return Trajectory("encoded", np.array(xs), np.array(ys), np.array(us), np.array(zs),
                      np.array(times), np.array(yts), np.array(uts),
                      np.array(zts) if zts else None, np.array(res) if res else None)


def export_figures_data(plain, encoded, outdir):
    """Write ``trajectory.csv`` and ``states.csv``; returns the runtime ratio.

    ``trajectory.csv`` has one row per step: the plain loop's plant state,
    measurement and control, the encoded measurement, the decoded control of
    the encoded loop, their absolute difference and cumulative wall times.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    n = plain.steps
    nt = encoded.ytilde.shape[1]
    tp = np.cumsum(plain.step_time_s)
    te = np.cumsum(encoded.step_time_s)
    with open(outdir / "trajectory.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "x1", "x2", "y"] + [f"ytilde_{i}" for i in range(nt)]
                   + ["u", "u_hat", "err", "t_plain_s", "t_encoded_s"])
        for k in range(n):
            u, uh = float(plain.u[k]), float(encoded.u[k])
            w.writerow([k, repr(float(plain.x[k, 0])), repr(float(plain.x[k, 1])),
                        repr(float(plain.y[k]))]
                       + [repr(float(v)) for v in encoded.ytilde[k]]
                       + [repr(u), repr(uh), repr(abs(u - uh)),
                          f"{tp[k]:.9f}", f"{te[k]:.9f}"])
    with open(outdir / "states.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "x1_plain", "x2_plain", "x1_encoded", "x2_encoded"])
        for k in range(n + 1):
            w.writerow([k] + [repr(float(v)) for v in plain.x[k]]
                       + [repr(float(v)) for v in encoded.x[k]])
    return float(te[-1] / tp[-1]) if tp[-1] > 0 else float("inf")
