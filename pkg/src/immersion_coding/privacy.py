"""Laplace noise, element-wise epsilon bounds and sigma calibration.

``sigma`` is the per-component Laplace scale ``b`` (density
``exp(-|x - mu| / b) / 2b``), not a standard deviation.  The guarantees are
pure epsilon-DP per encoded coordinate for a single release; no composition
over repeated steps is accounted for.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .errors import ConfigError, InvalidSchemeError

FLOAT64_EPS = np.finfo(np.float64).eps


@dataclass(frozen=True)
class LaplaceParams:
    mu: np.ndarray
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigError(f"Laplace scale must be positive, got {self.sigma}")


@dataclass(frozen=True)
class Sensitivity:
    """l1 sensitivities of the user data and of the utility."""

    delta_y: float = 1.0
    delta_u: float = 1.0

    def __post_init__(self):
        for name in ("delta_y", "delta_u"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")


def laplace_quantile(p, mu, b):
    """Inverse CDF of Laplace(mu, b) for p in (0, 1).

    Split at the median so each tail is ``log`` of a small argument formed
    without cancellation (``p - 0.5`` would round to -0.5 for tiny p).
    """
    p = np.asarray(p, dtype=np.float64)
    lower = p < 0.5
    with np.errstate(divide="ignore"):
        tail = np.where(lower, np.log(2.0 * p), -np.log(2.0 * (1.0 - p)))
    return mu + b * tail


def laplace_sample(mu, sigma, dim, rng):
    """Draw ``dim`` i.i.d. Laplace(mu, sigma) components by inverse-CDF sampling.

    ``mu`` may be a scalar or a length-``dim`` vector.  A zero scale returns
    ``mu`` exactly.
    """
    if dim < 1:
        raise ConfigError(f"dim must be >= 1, got {dim}")
    mu = np.broadcast_to(np.asarray(mu, dtype=np.float64), (dim,)).copy()
    if sigma == 0:
        return mu
    p = rng.random(dim)
    # rng.random() is in [0, 1); p == 0 would map to -inf.
    p[p == 0.0] = np.nextafter(0.0, 1.0)
    return laplace_quantile(p, mu, float(sigma))


def _sigma_of(scheme, sigma):
    return scheme.noise_sigma if sigma is None else float(sigma)


def _bound_terms_y(scheme):
    l1, _ = linalg.norms(scheme.pi1)
    _, n1_l2 = linalg.norms(scheme.n1)
    if np.any(n1_l2 == 0):
        raise InvalidSchemeError(f"n1 has zero rows {np.flatnonzero(n1_l2 == 0).tolist()}")
    return l1, n1_l2


def _bound_terms_u(scheme):
    l1, _ = linalg.norms(scheme.pi3)
    # "||Pi4 N1^j||_2" is read as row j of the product pi4 @ n1.
    _, prod_l2 = linalg.norms(scheme.pi4 @ scheme.n1)
    if np.any(prod_l2 == 0):
        raise InvalidSchemeError(
            f"pi4 @ n1 has zero rows {np.flatnonzero(prod_l2 == 0).tolist()}"
        )
    return l1, prod_l2


def epsilon_y(scheme, delta_y, sigma=None):
    """Per-row epsilon of the encoded input: ||pi1_i||_1 * delta / (||n1_i||_2 * sigma)."""
    if delta_y < 0:
        raise ConfigError("delta_y must be >= 0")
    l1, n1_l2 = _bound_terms_y(scheme)
    return l1 * delta_y / (n1_l2 * _sigma_of(scheme, sigma))


def epsilon_u(scheme, delta_u, sigma=None):
    """Per-row epsilon of the encoded utility: ||pi3_j||_1 * delta / (||(pi4 n1)_j||_2 * sigma)."""
    if delta_u < 0:
        raise ConfigError("delta_u must be >= 0")
    l1, prod_l2 = _bound_terms_u(scheme)
    return l1 * delta_u / (prod_l2 * _sigma_of(scheme, sigma))


def calibrate_sigma(scheme, delta_y, delta_u, eps_y_target, eps_u_target):
    """Smallest sigma meeting both per-row targets (the bounds are linear in 1/sigma)."""
    if not (eps_y_target > 0 and eps_u_target > 0):
        raise ConfigError("epsilon targets must be positive")
    ly, ny = _bound_terms_y(scheme)
    lu, nu = _bound_terms_u(scheme)
    need_y = np.max(ly * delta_y / (ny * eps_y_target))
    need_u = np.max(lu * delta_u / (nu * eps_u_target))
    return float(max(need_y, need_u))


@dataclass
class PrivacyReport:
    eps_y_rows: np.ndarray
    eps_u_rows: np.ndarray
    sensitivity: Sensitivity
    sigma: float
    condition_numbers: dict = field(default_factory=dict)
    decode_floor: dict = field(default_factory=dict)

    @property
    def eps_y_max(self):
        return float(np.max(self.eps_y_rows))

    @property
    def eps_u_max(self):
        return float(np.max(self.eps_u_rows))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["channel", "row", "epsilon"])
        for i, e in enumerate(self.eps_y_rows):
            w.writerow(["y", i, repr(float(e))])
        for j, e in enumerate(self.eps_u_rows):
            w.writerow(["u", j, repr(float(e))])
        return buf.getvalue()

    def to_text(self):
        lines = [
            f"sigma (Laplace scale)   {self.sigma:.6g}",
            f"delta_y / delta_u       {self.sensitivity.delta_y:.6g} / {self.sensitivity.delta_u:.6g}",
            f"eps_y max               {self.eps_y_max:.6e}",
            f"eps_u max               {self.eps_u_max:.6e}",
            f"perfect-secrecy margin  {perfect_secrecy_margin(self):.6e}",
        ]
        for name, c in self.condition_numbers.items():
            lines.append(f"cond({name}){' ' * (18 - len(name))}{c:.4e}")
        for name, v in self.decode_floor.items():
            lines.append(f"float64 floor {name}{' ' * (10 - len(name))}{v:.3e}")
        return "\n".join(lines) + "\n"


def decode_floor(scheme):
    """Rough float64 error floor of decoded inputs and utilities.

    Rounding of ``ytilde`` (magnitude set by the noise) is amplified by
    ``pi1_left``, and rounding of ``utilde`` (magnitude set by
    ``pi4 @ ytilde``) by ``pi3_left``.  Order-of-magnitude only.
    """
    m = scheme.dims.nt_y - scheme.dims.n_y
    typical = np.linalg.norm(scheme.n1 @ scheme.noise_mu) + np.sqrt(2.0 * m) * scheme.noise_sigma
    y_floor = FLOAT64_EPS * np.linalg.norm(scheme.pi1_left, 2) * typical
    u_floor = (FLOAT64_EPS * np.linalg.norm(scheme.pi3_left, 2)
               * np.linalg.norm(scheme.pi4, 2) * typical)
    return {"y": float(y_floor), "u": float(u_floor)}


def privacy_report(scheme, sensitivity=None, sigma=None):
    sensitivity = sensitivity or Sensitivity()
    return PrivacyReport(
        eps_y_rows=epsilon_y(scheme, sensitivity.delta_y, sigma),
        eps_u_rows=epsilon_u(scheme, sensitivity.delta_u, sigma),
        sensitivity=sensitivity,
        sigma=_sigma_of(scheme, sigma),
        condition_numbers=scheme.condition_numbers(),
        decode_floor=decode_floor(scheme),
    )


def perfect_secrecy_margin(report):
    """Distance from the epsilon = 0 ideal: the largest epsilon over all coordinates."""
    return max(report.eps_y_max, report.eps_u_max)


@dataclass(frozen=True)
class ProbeResult:
    coordinate: int
    max_log_ratio: float
    slack: float
    analytic_eps: float
    max_excess: float
    bins_used: int

    @property
    def within_bound(self):
        return self.max_excess <= self.analytic_eps


def adjacency_ratio_probe(scheme, y, y_prime, trials=100_000, bins=50, rng=None,
                          z=5.0, min_count=100, chunk=200_000):
    """Histogram estimate of the worst log probability ratio per encoded coordinate.

    Both inputs are encoded ``trials`` times with fresh noise.  Each coordinate
    is binned on common edges (central 99.8% of a pooled pilot sample); bins
    where either count is below ``min_count`` are skipped.  For every bin the
    standard error of ``log(c1 / c2)`` is ``sqrt(1/c1 + 1/c2)``; ``slack`` is
    ``z`` standard errors at the bin of largest ratio and ``max_excess`` is
    the largest ``|log ratio| - z * se`` over bins, which should not exceed
    the analytic epsilon.
    """
    if trials < 100_000:
        raise ConfigError("the probe needs at least 1e5 trials")
    rng = rng if rng is not None else np.random.default_rng()
    y = linalg.as_vector(y, scheme.dims.n_y, "y")
    y_prime = linalg.as_vector(y_prime, scheme.dims.n_y, "y_prime")
    eps = epsilon_y(scheme, float(np.abs(y - y_prime).sum()))
    m = scheme.dims.nt_y - scheme.dims.n_y

    def draw(v, n):
        s = laplace_sample(0.0, scheme.noise_sigma, n * m, rng).reshape(n, m) + scheme.noise_mu
        return (scheme.pi1 @ v)[None, :] + s @ scheme.n1.T

    pilot = min(trials, chunk)
    a, b = draw(y, pilot), draw(y_prime, pilot)
    pooled = np.vstack([a, b])
    lo, hi = np.quantile(pooled, [0.001, 0.999], axis=0)
    edges = [np.linspace(lo[i], hi[i], bins + 1) for i in range(scheme.dims.nt_y)]
    ca = np.zeros((scheme.dims.nt_y, bins))
    cb = np.zeros((scheme.dims.nt_y, bins))

    def accumulate(xa, xb):
        for i in range(scheme.dims.nt_y):
            ca[i] += np.histogram(xa[:, i], edges[i])[0]
            cb[i] += np.histogram(xb[:, i], edges[i])[0]

    accumulate(a, b)
    done = pilot
    while done < trials:
        n = min(chunk, trials - done)
        accumulate(draw(y, n), draw(y_prime, n))
        done += n

    results = []
    for i in range(scheme.dims.nt_y):
        ok = (ca[i] >= min_count) & (cb[i] >= min_count)
        if not ok.any():
            results.append(ProbeResult(i, float("nan"), float("nan"), float(eps[i]),
                                       float("nan"), 0))
            continue
        lr = np.abs(np.log(ca[i][ok] / cb[i][ok]))
        se = np.sqrt(1.0 / ca[i][ok] + 1.0 / cb[i][ok])
        k = int(np.argmax(lr))
        results.append(ProbeResult(i, float(lr[k]), float(z * se[k]), float(eps[i]),
                                   float(np.max(lr - z * se)), int(ok.sum())))
    return results
