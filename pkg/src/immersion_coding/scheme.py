"""Key material and the affine encoding, immersion and utility maps.

The user holds an :class:`EncodingScheme`.  Inputs are lifted as
``ytilde = pi1 @ y + n1 @ s`` with Laplace noise ``s`` drawn in the kernel of
``pi1_left``, internal states as ``pi2 @ zeta``, and utilities as
``utilde = pi3 @ u + pi4 @ ytilde``.  Decoding uses the stored left inverses.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import linalg
from .errors import ConfigError, InvalidSchemeError, ProtocolError, SchemeFormatError
from .privacy import laplace_sample

MAGIC = b"IMKT"
FORMAT_VERSION = 1
INVARIANT_TOL = 1e-10

_PREFIX = struct.Struct("<4sH6Q")


@dataclass(frozen=True)
class SchemeDims:
    n_y: int
    n_u: int
    n_zeta: int
    nt_y: int
    nt_u: int
    nt_zeta: int

    def __post_init__(self):
        for name in ("n_y", "n_u", "n_zeta"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for small, big in (("n_y", "nt_y"), ("n_u", "nt_u"), ("n_zeta", "nt_zeta")):
            if not getattr(self, big) > getattr(self, small):
                raise ConfigError(
                    f"{big}={getattr(self, big)} must exceed {small}={getattr(self, small)}"
                )

    def as_tuple(self):
        return (self.n_y, self.n_u, self.n_zeta, self.nt_y, self.nt_u, self.nt_zeta)


@dataclass(frozen=True)
class SchemeScales:
    """Half-widths of the uniform entry distributions of pi1..pi4."""

    pi1: float = 1e-4
    pi2: float = 1e-4
    pi3: float = 1e-4
    pi4: float = 1e4


# "strong": small pi1..pi3, large pi4 and sigma; strongest privacy, but float64
# decoding then loses roughly machine-eps / epsilon of the utility.
# "balanced": epsilon around 1e-6 with decode error far below 1e-6.
PRESETS = {
    "strong": (SchemeScales(1e-4, 1e-4, 1e-4, 1e4), 1e4),
    "balanced": (SchemeScales(1e-4, 1e-4, 1e-4, 1.0), 1e2),
    "unit": (SchemeScales(1.0, 1.0, 1.0, 1.0), 1.0),
}


@dataclass(frozen=True, eq=False)
class EncodingScheme:
    """Complete key material.  Immutable once built."""

    dims: SchemeDims
    pi1: np.ndarray
    pi2: np.ndarray
    pi3: np.ndarray
    pi4: np.ndarray
    n1: np.ndarray
    pi1_left: np.ndarray
    pi2_left: np.ndarray
    pi3_left: np.ndarray
    noise_mu: np.ndarray
    noise_sigma: float
    seed: int = 0

    def __post_init__(self):
        for name in ("pi1", "pi2", "pi3", "pi4", "n1", "pi1_left", "pi2_left", "pi3_left",
                     "noise_mu"):
            a = np.array(getattr(self, name), dtype=np.float64)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        object.__setattr__(self, "noise_sigma", float(self.noise_sigma))
        object.__setattr__(self, "seed", int(self.seed))
        self._check()

    def _check(self):
        d = self.dims
        shapes = {
            "pi1": (d.nt_y, d.n_y),
            "pi2": (d.nt_zeta, d.n_zeta),
            "pi3": (d.nt_u, d.n_u),
            "pi4": (d.nt_u, d.nt_y),
            "n1": (d.nt_y, d.nt_y - d.n_y),
            "pi1_left": (d.n_y, d.nt_y),
            "pi2_left": (d.n_zeta, d.nt_zeta),
            "pi3_left": (d.n_u, d.nt_u),
            "noise_mu": (d.nt_y - d.n_y,),
        }
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise InvalidSchemeError(
                    f"{name} has shape {getattr(self, name).shape}, expected {shape}"
                )
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvalidSchemeError(f"{name} has non-finite entries")
        if not self.noise_sigma >= 0 or not np.isfinite(self.noise_sigma):
            raise InvalidSchemeError(f"noise sigma must be finite and >= 0, got {self.noise_sigma}")
        for left, pi in (("pi1_left", "pi1"), ("pi2_left", "pi2"), ("pi3_left", "pi3")):
            res = np.abs(getattr(self, left) @ getattr(self, pi) - np.eye(getattr(self, pi).shape[1]))
            if res.max() > INVARIANT_TOL:
                raise InvalidSchemeError(f"{left} @ {pi} deviates from I by {res.max():.3e}")
        # pi1_left @ n1 scales with both factors; hand-built schemes may use huge n1.
        scale = max(1.0, np.abs(self.pi1_left).max() * np.abs(self.n1).max())
        kres = np.abs(self.pi1_left @ self.n1).max()
        if kres > INVARIANT_TOL * scale:
            raise InvalidSchemeError(f"pi1_left @ n1 is not zero (max {kres:.3e})")
        bad = linalg.zero_rows(self.n1)
        if bad.size:
            raise InvalidSchemeError(f"n1 has zero rows {bad.tolist()}")
        if np.linalg.matrix_rank(self.pi4) < min(self.pi4.shape):
            raise InvalidSchemeError("pi4 is not full rank")

    @classmethod
    def from_matrices(cls, pi1, pi2, pi3, pi4, n1=None, noise_mu=0.0, noise_sigma=1.0, seed=0):
        """Assemble a scheme from given maps, computing left inverses (and n1 if absent)."""
        pi1, pi2, pi3, pi4 = (linalg.as_matrix(m, name) for m, name in
                              ((pi1, "pi1"), (pi2, "pi2"), (pi3, "pi3"), (pi4, "pi4")))
        dims = SchemeDims(pi1.shape[1], pi3.shape[1], pi2.shape[1],
                          pi1.shape[0], pi3.shape[0], pi2.shape[0])
        if n1 is None:
            n1 = linalg.kernel_basis(pi1)
        mu = np.broadcast_to(np.asarray(noise_mu, dtype=np.float64), (dims.nt_y - dims.n_y,))
        return cls(dims, pi1, pi2, pi3, pi4, linalg.as_matrix(n1, "n1"),
                   linalg.left_inverse(pi1), linalg.left_inverse(pi2), linalg.left_inverse(pi3),
                   mu, noise_sigma, seed)

    def target_keys(self):
        return TargetKeys(self.dims, self.pi1_left, self.pi2, self.pi2_left, self.pi3, self.pi4)

    def condition_numbers(self):
        return {name: linalg.condition_number(getattr(self, name))
                for name in ("pi1", "pi2", "pi3", "pi4")}

    def to_bytes(self):
        parts = [_PREFIX.pack(MAGIC, FORMAT_VERSION, *self.dims.as_tuple())]
        for name in _MATRIX_ORDER:
            parts.append(linalg.matrix_to_bytes(getattr(self, name)))
        parts.append(linalg.vector_to_bytes(self.noise_mu))
        parts.append(struct.pack("<dQ", self.noise_sigma, self.seed & 0xFFFFFFFFFFFFFFFF))
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf):
        if len(buf) < _PREFIX.size:
            raise SchemeFormatError("truncated scheme header")
        magic, version, *dims = _PREFIX.unpack_from(buf, 0)
        if magic != MAGIC:
            raise SchemeFormatError(f"bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise SchemeFormatError(f"unsupported scheme format version {version}")
        offset = _PREFIX.size
        mats = {}
        try:
            for name in _MATRIX_ORDER:
                mats[name], offset = linalg.matrix_from_bytes(buf, offset)
            mu, offset = linalg.vector_from_bytes(buf, offset)
        except ValueError as exc:
            raise SchemeFormatError(str(exc)) from exc
        if len(buf) - offset != 16:
            raise SchemeFormatError("truncated or oversized scheme trailer")
        sigma, seed = struct.unpack_from("<dQ", buf, offset)
        return cls(SchemeDims(*dims), noise_mu=mu, noise_sigma=sigma, seed=seed, **mats)

    def fingerprint(self):
        return hashlib.sha256(self.to_bytes()).digest()


_MATRIX_ORDER = ("pi1", "pi2", "pi3", "pi4", "n1", "pi1_left", "pi2_left", "pi3_left")


@dataclass(frozen=True, eq=False)
class TargetKeys:
    """The part of the key material that the target algorithm embeds (cloud side)."""

    dims: SchemeDims
    pi1_left: np.ndarray
    pi2: np.ndarray
    pi2_left: np.ndarray
    pi3: np.ndarray
    pi4: np.ndarray

    def to_bytes(self):
        parts = [_PREFIX.pack(TARGET_MAGIC, FORMAT_VERSION, *self.dims.as_tuple())]
        parts += [linalg.matrix_to_bytes(getattr(self, n)) for n in _TARGET_ORDER]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf):
        if len(buf) < _PREFIX.size:
            raise SchemeFormatError("truncated target-key header")
        magic, version, *dims = _PREFIX.unpack_from(buf, 0)
        if magic != TARGET_MAGIC:
            raise SchemeFormatError(f"bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise SchemeFormatError(f"unsupported target-key format version {version}")
        offset = _PREFIX.size
        mats = {}
        try:
            for name in _TARGET_ORDER:
                mats[name], offset = linalg.matrix_from_bytes(buf, offset)
        except ValueError as exc:
            raise SchemeFormatError(str(exc)) from exc
        if offset != len(buf):
            raise SchemeFormatError("trailing bytes after target keys")
        dims = SchemeDims(*dims)
        keys = cls(dims, **mats)
        expected = {"pi1_left": (dims.n_y, dims.nt_y), "pi2": (dims.nt_zeta, dims.n_zeta),
                    "pi2_left": (dims.n_zeta, dims.nt_zeta), "pi3": (dims.nt_u, dims.n_u),
                    "pi4": (dims.nt_u, dims.nt_y)}
        for name, shape in expected.items():
            if getattr(keys, name).shape != shape:
                raise SchemeFormatError(f"{name} has shape {getattr(keys, name).shape}, expected {shape}")
        return keys

    def fingerprint(self):
        return hashlib.sha256(self.to_bytes()).digest()


TARGET_MAGIC = b"IMTK"
_TARGET_ORDER = ("pi1_left", "pi2", "pi2_left", "pi3", "pi4")


@dataclass(frozen=True)
class EncodedInput:
    ytilde: np.ndarray
    step: int = 0


@dataclass(frozen=True)
class EncodedUtility:
    utilde: np.ndarray
    step: int = 0


def keygen(dims, scales=None, mu=0.0, sigma=1e4, seed=0):
    """Randomly draw a full key set.

    pi1..pi4 have i.i.d. uniform entries at the given scales; pi1 is redrawn
    when its kernel basis would have a zero row.  Deterministic in ``seed``.
    """
    if not isinstance(dims, SchemeDims):
        dims = SchemeDims(*dims)
    scales = scales or SchemeScales()
    if not sigma > 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    rng = np.random.default_rng(seed)
    for _ in range(linalg.MAX_ATTEMPTS):
        pi1 = linalg.gen_full_col_rank(dims.nt_y, dims.n_y, scales.pi1, rng)
        n1 = linalg.kernel_basis(pi1)
        if not linalg.zero_rows(n1).size:
            break
    else:
        raise InvalidSchemeError("could not draw pi1 whose kernel basis has no zero rows")
    pi2 = linalg.gen_full_col_rank(dims.nt_zeta, dims.n_zeta, scales.pi2, rng)
    pi3 = linalg.gen_full_col_rank(dims.nt_u, dims.n_u, scales.pi3, rng)
    pi4 = linalg.gen_full_rank(dims.nt_u, dims.nt_y, scales.pi4, rng)
    return EncodingScheme.from_matrices(pi1, pi2, pi3, pi4, n1=n1, noise_mu=mu,
                                        noise_sigma=sigma, seed=seed)


def keygen_preset(dims, preset="strong", mu=0.0, seed=0):
    try:
        scales, sigma = PRESETS[preset]
    except KeyError:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}") from None
    return keygen(dims, scales, mu=mu, sigma=sigma, seed=seed)


def encode_input(scheme, y, rng, step=0, *, return_noise=False):
    """Encode ``y`` as ``pi1 @ y + n1 @ s`` with fresh Laplace noise ``s``.

    ``s`` is key-equivalent; it is only returned when ``return_noise`` is set
    (tests and audits).
    """
    y = linalg.as_vector(y, scheme.dims.n_y, "y")
    s = laplace_sample(scheme.noise_mu, scheme.noise_sigma, scheme.dims.nt_y - scheme.dims.n_y, rng)
    e = EncodedInput(scheme.pi1 @ y + scheme.n1 @ s, step)
    return (e, s) if return_noise else e


def decode_input(scheme, e):
    ytilde = linalg.as_vector(e.ytilde, scheme.dims.nt_y, "ytilde")
    return scheme.pi1_left @ ytilde


def encode_utility(scheme, u, ytilde, step=0):
    u = linalg.as_vector(u, scheme.dims.n_u, "u")
    ytilde = linalg.as_vector(ytilde, scheme.dims.nt_y, "ytilde")
    return EncodedUtility(scheme.pi3 @ u + scheme.pi4 @ ytilde, step)


def decode_utility(scheme, eu, ei):
    """Recover ``u = pi3_left @ (utilde - pi4 @ ytilde)`` using the same step's input."""
    if eu.step != ei.step:
        raise ProtocolError(f"utility for step {eu.step} decoded against input of step {ei.step}")
    utilde = linalg.as_vector(eu.utilde, scheme.dims.nt_u, "utilde")
    ytilde = linalg.as_vector(ei.ytilde, scheme.dims.nt_y, "ytilde")
    return scheme.pi3_left @ (utilde - scheme.pi4 @ ytilde)


def immerse_state(scheme, zeta):
    return scheme.pi2 @ linalg.as_vector(zeta, scheme.dims.n_zeta, "zeta")


def save_scheme(scheme, path):
    Path(path).write_bytes(scheme.to_bytes())


def load_scheme(path):
    return EncodingScheme.from_bytes(Path(path).read_bytes())


def save_target_keys(keys, path):
    Path(path).write_bytes(keys.to_bytes())


def load_target_keys(path):
    return TargetKeys.from_bytes(Path(path).read_bytes())
