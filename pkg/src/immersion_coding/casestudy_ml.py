"""Gradient training on an encoded database.

The user encodes every record (features with the label appended as
``label / (K - 1)``) and ships the encoded set once.  The cloud decodes records
with ``pi1_left``, runs ``T`` local epochs of SGD or Adam on the immersed
optimizer state, and returns ``pi3 @ w_T + pi4 @ ytilde_0``.  Minibatches come
from a seeded schedule shared with the plain reference run, so the two
trainings follow the same path.
"""

from __future__ import annotations

import csv
import hashlib
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import linalg
from .algorithm import TwoScaleAlgorithm
from .errors import ConfigError, NumericError, ScheduleMismatchError
from .scheme import EncodedUtility, SchemeDims, encode_input, keygen_preset

DEFAULT_CLIP = 1000.0


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.features = linalg.as_matrix(self.features, "features")
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.labels.shape[0] != self.features.shape[0]:
            raise ConfigError("features and labels differ in length")
        if self.n_classes < 2 or self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise ConfigError("labels must lie in [0, n_classes) with n_classes >= 2")
        if self.features.min() < 0 or self.features.max() > 1:
            raise ConfigError("features must be normalised to [0, 1]")

    @property
    def size(self):
        return self.features.shape[0]

    @property
    def n_features(self):
        return self.features.shape[1]

    def records(self):
        """Rows ``[features, label / (K - 1)]``; every entry lies in [0, 1]."""
        lab = self.labels[:, None] / (self.n_classes - 1)
        return np.hstack([self.features, lab])


def split_records(records, n_classes):
    """Inverse of ``Dataset.records`` (labels rounded back to integers)."""
    labels = np.rint(records[:, -1] * (n_classes - 1)).astype(np.int64)
    return records[:, :-1], np.clip(labels, 0, n_classes - 1)


def make_blobs(n=400, seed=0, centers=((0.85, 0.15), (0.15, 0.85)), spread=0.05):
    """Gaussian blobs clipped to [0, 1]; the default pair is linearly separable."""
    rng = np.random.default_rng(seed)
    centers = np.asarray(centers, dtype=np.float64)
    labels = np.arange(n) % len(centers)
    rng.shuffle(labels)
    x = centers[labels] + spread * rng.standard_normal((n, centers.shape[1]))
    return Dataset(np.clip(x, 0.0, 1.0), labels, len(centers))


def load_digits_dataset(n=None, n_classes=10):
    """The 8x8 digit images from scikit-learn, scaled to [0, 1]."""
    from sklearn.datasets import load_digits

    d = load_digits(n_class=n_classes)
    x, y = d.data / 16.0, d.target
    if n is not None:
        x, y = x[:n], y[:n]
    return Dataset(x, y, n_classes)


def save_dataset_csv(ds, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(ds.n_features)] + ["label"])
        for x, lab in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) for v in x] + [int(lab)])


def load_dataset_csv(path, n_classes=None):
    raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    labels = raw[:, -1].astype(np.int64)
    return Dataset(raw[:, :-1], labels, n_classes or int(labels.max()) + 1)


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


@dataclass(frozen=True)
class Model:
    """Softmax classifier: ``logistic`` (linear) or ``mlp`` (one ReLU hidden layer)."""

    arch: str
    n_features: int
    n_classes: int
    hidden: int = 16

    def __post_init__(self):
        if self.arch not in ("logistic", "mlp"):
            raise ConfigError(f"unknown architecture {self.arch!r}")

    @property
    def shapes(self):
        d, k, h = self.n_features, self.n_classes, self.hidden
        if self.arch == "logistic":
            return [(d, k), (k,)]
        return [(d, h), (h,), (h, k), (k,)]

    @property
    def n_params(self):
        return sum(int(np.prod(s)) for s in self.shapes)

    def unpack(self, w):
        out, i = [], 0
        for s in self.shapes:
            n = int(np.prod(s))
            out.append(w[i:i + n].reshape(s))
            i += n
        return out

    def init(self, seed=0):
        rng = np.random.default_rng(seed)
        parts = []
        for s in self.shapes:
            scale = 0.0 if len(s) == 1 else 1.0 / np.sqrt(s[0])
            parts.append((scale * rng.standard_normal(s)).ravel())
        return np.concatenate(parts)

    def logits(self, w, x):
        p = self.unpack(w)
        if self.arch == "logistic":
            return x @ p[0] + p[1]
        h = np.maximum(x @ p[0] + p[1], 0.0)
        return h @ p[2] + p[3]

    def loss_and_grad(self, w, x, labels):
        """Mean cross-entropy and its gradient with respect to ``w``."""
        p = self.unpack(w)
        n = x.shape[0]
        onehot = np.eye(self.n_classes)[labels]
        if self.arch == "logistic":
            ls = _log_softmax(x @ p[0] + p[1])
            dz = (np.exp(ls) - onehot) / n
            grads = [x.T @ dz, dz.sum(axis=0)]
        else:
            a = x @ p[0] + p[1]
            h = np.maximum(a, 0.0)
            ls = _log_softmax(h @ p[2] + p[3])
            dz = (np.exp(ls) - onehot) / n
            dh = (dz @ p[2].T) * (a > 0)
            grads = [x.T @ dh, dh.sum(axis=0), h.T @ dz, dz.sum(axis=0)]
        loss = -float((onehot * ls).sum()) / n
        return loss, np.concatenate([g.ravel() for g in grads])

    def predict(self, w, x):
        return np.argmax(self.logits(w, x), axis=1)

    def accuracy(self, w, ds):
        return float(np.mean(self.predict(w, ds.features) == ds.labels))


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd"
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float = DEFAULT_CLIP

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.kind!r}")
        if not self.lr > 0 or not self.eps > 0 or not self.clip > 0:
            raise ConfigError("lr, eps and clip must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")

    def state_dim(self, n_params):
        return n_params if self.kind == "sgd" else 3 * n_params


@dataclass
class OptimizerState:
    """Parameters plus Adam moments; ``t`` counts completed updates."""

    w: np.ndarray
    config: OptimizerConfig
    m: np.ndarray = None
    v: np.ndarray = None
    t: int = 0

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros_like(self.w)
        if self.v is None:
            self.v = np.zeros_like(self.w)

    def as_vector(self):
        if self.config.kind == "sgd":
            return self.w.copy()
        return np.concatenate([self.w, self.m, self.v])

    @classmethod
    def from_vector(cls, vec, config, t=0):
        if config.kind == "sgd":
            return cls(vec.copy(), config, t=t)
        n = vec.shape[0] // 3
        return cls(vec[:n].copy(), config, vec[n:2 * n].copy(), vec[2 * n:].copy(), t)


def clip_gradient(g, c):
    """Scale ``g`` so that its l2 norm is at most ``c``."""
    norm = np.linalg.norm(g)
    return g * (c / norm) if norm > c else g


def _gradient(state, model, batch):
    x, labels = batch
    if x.shape[0] == 0:
        raise ConfigError("empty minibatch")
    loss, g = model.loss_and_grad(state.w, x, labels)
    if not (np.isfinite(loss) and np.all(np.isfinite(g))):
        raise NumericError("non-finite loss or gradient", step=state.t)
    return clip_gradient(g, state.config.clip)


def sgd_step(state, model, batch):
    g = _gradient(state, model, batch)
    return OptimizerState(state.w - state.config.lr * g, state.config, state.m, state.v,
                          state.t + 1)


def adam_step(state, model, batch):
    """One Adam update; bias corrections use the 1-based update count."""
    c = state.config
    g = _gradient(state, model, batch)
    m = c.beta1 * state.m + (1 - c.beta1) * g
    v = c.beta2 * state.v + (1 - c.beta2) * g * g
    t = state.t + 1
    m_hat = m / (1 - c.beta1 ** t)
    # v is a sum of squares; the clamp only removes rounding below zero.
    v_hat = np.maximum(v / (1 - c.beta2 ** t), 0.0)
    w = state.w - c.lr * m_hat / (np.sqrt(v_hat) + c.eps)
    return OptimizerState(w, c, m, v, t)


def optimizer_step(state, model, batch):
    return (sgd_step if state.config.kind == "sgd" else adam_step)(state, model, batch)


@dataclass(frozen=True)
class MinibatchSchedule:
    """Seeded per-epoch permutations cut into batches."""

    n_records: int
    batch_size: int = 16
    epochs: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.n_records < 1 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("schedule sizes must be >= 1")

    def batches(self, epoch):
        perm = np.random.default_rng([self.seed, epoch]).permutation(self.n_records)
        return [perm[i:i + self.batch_size] for i in range(0, self.n_records, self.batch_size)]

    @property
    def updates_per_epoch(self):
        return -(-self.n_records // self.batch_size)

    def checksum(self):
        h = hashlib.sha256()
        for e in range(self.epochs):
            for b in self.batches(e):
                h.update(np.asarray(b, dtype="<i8").tobytes())
        return h.hexdigest()


def train_epoch(state, model, x, labels, batches):
    for b in batches:
        state = optimizer_step(state, model, (x[b], labels[b]))
    return state


@dataclass
class TrainingAlgorithm(TwoScaleAlgorithm):
    """Two-scale form of training: one local step is one epoch.

    The input is the full record matrix and ``w_t = [t]`` carries the epoch
    index in clear.  The state is the optimizer vector (``w`` for SGD,
    ``[w, m, v]`` for Adam) and the utility is ``w``.
    """

    model: Model = None
    config: OptimizerConfig = None
    schedule: MinibatchSchedule = None


def training_algorithm(model, config, schedule, w0):
    w0 = linalg.as_vector(w0, model.n_params, "w0")
    n_p = model.n_params
    per_epoch = schedule.updates_per_epoch

    def f(zeta, records, w):
        epoch = int(w[0])
        x, labels = split_records(records, model.n_classes)
        state = OptimizerState.from_vector(zeta, config, t=epoch * per_epoch)
        return train_epoch(state, model, x, labels, schedule.batches(epoch)).as_vector()

    def g(zeta, records, w):
        return zeta[:n_p].copy()

    zeta0 = OptimizerState(w0, config).as_vector()
    return TrainingAlgorithm(f, g, zeta0, model.n_features + 1, n_p, n_w=1,
                             name=f"{model.arch}-{config.kind}", local_steps=schedule.epochs,
                             model=model, config=config, schedule=schedule)


def ml_dims(model, config, extra=2):
    """Scheme dimensions for training ``model`` with ``config`` (each lift adds ``extra``)."""
    n_y = model.n_features + 1
    n_z = config.state_dim(model.n_params)
    n_u = model.n_params
    return SchemeDims(n_y, n_u, n_z, n_y + extra, n_u + extra, n_z + extra)


@dataclass
class EncodedDataset:
    ytilde: np.ndarray
    n_classes: int

    @property
    def ytilde0(self):
        return self.ytilde[0]


def encode_dataset(scheme, ds, rng):
    """Encode every record with its own noise draw."""
    recs = ds.records()
    if recs.shape[1] != scheme.dims.n_y:
        raise ConfigError(f"records have {recs.shape[1]} entries, scheme expects {scheme.dims.n_y}")
    rows = [encode_input(scheme, r, rng, step=i).ytilde for i, r in enumerate(recs)]
    return EncodedDataset(np.array(rows), ds.n_classes)


def train_plain(alg, ds, record=False):
    """Reference training on the plain records; returns ``(w_T, per-epoch w list)``."""
    recs = ds.records()
    zeta, hist = alg.zeta0.copy(), []
    for t in range(alg.local_steps):
        zeta = alg.f(zeta, recs, np.array([t]))
        if record:
            hist.append(alg.g(zeta, recs, None))
    return alg.g(zeta, recs, None), hist


@dataclass
class TargetResult:
    utility: EncodedUtility
    checksum: str
    history: list = field(default_factory=list)


def target_optimize(alg, keys, enc, expected_checksum=None, record=False, on_epoch=None):
    """Cloud side: ``T`` immersed epochs on the decoded-in-cloud records.

    ``zeta~ <- pi2 @ f(pi2_left @ zeta~, records, t)``, then the utility
    ``pi3 @ g(pi2_left @ zeta~_T) + pi4 @ ytilde_0``.  With ``record`` the
    utility after every epoch is kept too (for accuracy curves); ``on_epoch(t)``
    is called after each epoch.
    """
    keys = keys.target_keys() if hasattr(keys, "target_keys") else keys
    checksum = alg.schedule.checksum()
    if expected_checksum is not None and checksum != expected_checksum:
        raise ScheduleMismatchError("minibatch schedule differs from the reference run")
    if enc.ytilde.shape[1] != keys.dims.nt_y:
        raise ConfigError("encoded records do not match the scheme dimension")
    if alg.n_zeta != keys.dims.n_zeta or alg.n_u != keys.dims.n_u:
        raise ConfigError("optimizer state or parameter count does not match the scheme")
    recs = enc.ytilde @ keys.pi1_left.T
    y0 = enc.ytilde0
    state = keys.pi2 @ alg.zeta0
    hist = []

    def utility(st, t):
        u = keys.pi3 @ alg.g(keys.pi2_left @ st, recs, None) + keys.pi4 @ y0
        if not np.all(np.isfinite(u)):
            raise NumericError("encoded model is not finite", step=t)
        return EncodedUtility(u, 0)

    for t in range(alg.local_steps):
        z = alg.f(keys.pi2_left @ state, recs, np.array([t]))
        if not np.all(np.isfinite(z)):
            raise NumericError("optimizer state is not finite", step=t)
        state = keys.pi2 @ z
        if record:
            hist.append(utility(state, t))
        if on_epoch is not None:
            on_epoch(t)
    return TargetResult(utility(state, alg.local_steps), checksum, hist)


def decode_model(scheme, wtilde, ytilde0):
    """``w* = pi3_left @ (w~* - pi4 @ ytilde_0)``."""
    if ytilde0 is None:
        raise ConfigError("decoding the model needs ytilde_0, the first encoded record")
    u = wtilde.utilde if isinstance(wtilde, EncodedUtility) else wtilde
    u = linalg.as_vector(u, scheme.dims.nt_u, "wtilde")
    y0 = linalg.as_vector(ytilde0, scheme.dims.nt_y, "ytilde0")
    return scheme.pi3_left @ (u - scheme.pi4 @ y0)


@dataclass(frozen=True)
class MLConfig:
    arch: str = "logistic"
    optimizer: str = "sgd"
    dataset: str = "blobs"
    n_records: int = 400
    hidden: int = 16
    batch_size: int = 16
    epochs: int = 50
    lr: float = 0.001
    clip: float = DEFAULT_CLIP
    preset: str = "balanced"
    extra: int = 32
    seed: int = 0


@dataclass
class BenchmarkResult:
    rows: list
    w_plain: np.ndarray
    w_siml: np.ndarray

    @property
    def max_param_gap(self):
        return float(np.max(np.abs(self.w_plain - self.w_siml)))

    @property
    def time_ratio(self):
        p, s = self.rows[-1]["plain_time_s"], self.rows[-1]["siml_time_s"]
        return s / p if p > 0 else float("inf")

    def write_csv(self, path):
        cols = ["epoch", "plain_acc", "siml_acc", "plain_time_s", "siml_time_s"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (f"{r[k]:.9f}" if k.endswith("_s") else r[k]) for k in cols})


def _load(cfg):
    if cfg.dataset == "blobs":
        return make_blobs(cfg.n_records, seed=cfg.seed)
    if cfg.dataset == "digits":
        return load_digits_dataset(cfg.n_records)
    p = Path(cfg.dataset)
    if p.exists():
        return load_dataset_csv(p)
    raise ConfigError(f"unknown dataset {cfg.dataset!r}")


def benchmark(cfg=None, scheme=None):
    """Plain vs encoded training under one schedule, with per-epoch accuracy and time."""
    cfg = cfg or MLConfig()
    ds = _load(cfg)
    model = Model(cfg.arch, ds.n_features, ds.n_classes, cfg.hidden)
    opt = OptimizerConfig(cfg.optimizer, cfg.lr, clip=cfg.clip)
    sched = MinibatchSchedule(ds.size, cfg.batch_size, cfg.epochs, cfg.seed)
    alg = training_algorithm(model, opt, sched, model.init(cfg.seed))
    scheme = scheme or keygen_preset(ml_dims(model, opt, cfg.extra), cfg.preset, seed=cfg.seed)

    recs = ds.records()
    zeta, plain_w, plain_t = alg.zeta0.copy(), [], []
    t0 = time.perf_counter()
    for t in range(cfg.epochs):
        zeta = alg.f(zeta, recs, np.array([t]))
        plain_w.append(alg.g(zeta, recs, None))
        plain_t.append(time.perf_counter() - t0)

    t0 = time.perf_counter()
    enc = encode_dataset(scheme, ds, np.random.default_rng([cfg.seed, 1]))
    t_enc = time.perf_counter() - t0
    siml_t = []
    t0 = time.perf_counter()
    res = target_optimize(alg, scheme.target_keys(), enc, sched.checksum(), record=True,
                          on_epoch=lambda t: siml_t.append(time.perf_counter() - t0))
    siml_w = [decode_model(scheme, u, enc.ytilde0) for u in res.history]

    rows = []
    for t in range(cfg.epochs):
        rows.append({"epoch": t + 1,
                     "plain_acc": model.accuracy(plain_w[t], ds),
                     "siml_acc": model.accuracy(siml_w[t], ds),
                     "plain_time_s": plain_t[t],
                     "siml_time_s": t_enc + siml_t[t]})
    final = decode_model(scheme, res.utility, enc.ytilde0)
    return BenchmarkResult(rows, plain_w[-1], final)

