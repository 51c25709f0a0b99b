"""Visible (pixel) distributions and their perfect-reconstruction corrections.

The continuous Bernoulli is handled internally through its natural parameter
``eta = logit(lambda)``: the density is ``exp(x * eta - A(eta))`` on [0, 1] with
log-partition ``A(eta) = log((exp(eta) - 1) / eta)``.  That form stays finite
for the extreme shapes needed by near-0/1 pixels, where ``lambda`` itself
underflows.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import xlogy

from .nn import log_softmax, sigmoid

log = logging.getLogger(__name__)

EPS_X = 1e-4
EPS_LAMBDA = 1e-6
N_LEVELS = 256
LOG_UNIFORM_256 = -np.log(256.0)

_SERIES_ETA_LOGNORM = 4e-4  # |lambda - 0.5| < 1e-4
_SERIES_ETA_MEAN = 1e-2


# ---------------------------------------------------------------------------
# continuous Bernoulli, natural parametrisation
# ---------------------------------------------------------------------------


def _check_lambda(lam):
    lam = np.asarray(lam, dtype=np.float64)
    if np.any(~((lam > 0) & (lam < 1))):
        raise ValueError("lambda must lie strictly inside (0, 1)")
    return lam


def lambda_to_eta(lam):
    lam = _check_lambda(lam)
    return np.log(lam) - np.log1p(-lam)


def eta_to_lambda(eta):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(eta, dtype=np.float64)))


def cb_log_partition(eta):
    """A(eta) = log((e^eta - 1) / eta), with A(0) = 0."""
    eta = np.asarray(eta, dtype=np.float64)
    small = np.abs(eta) < _SERIES_ETA_LOGNORM
    safe = np.where(small, 1.0, eta)
    pos = safe > 0
    # e^eta - 1 = e^eta (1 - e^-eta) for eta > 0; for eta < 0 both factors are negative
    exact = np.where(pos, safe, 0.0) + np.log(-np.expm1(-np.abs(safe))) - np.log(np.abs(safe))
    series = eta / 2 + eta**2 / 24 - eta**4 / 2880
    return np.where(small, series, exact)


def cb_mean_eta(eta):
    """E[x] = A'(eta) = 1 / (1 - e^-eta) - 1 / eta."""
    eta = np.asarray(eta, dtype=np.float64)
    small = np.abs(eta) < _SERIES_ETA_MEAN
    safe = np.where(small, 1.0, eta)
    t = -np.abs(safe)
    exact = np.where(safe > 0, 1.0 / (-np.expm1(t)), np.exp(t) / np.expm1(t)) - 1.0 / safe
    series = 0.5 + eta / 12 - eta**3 / 720
    return np.where(small, series, exact)


def cb_log_pdf_eta(x, eta):
    return np.asarray(x, dtype=np.float64) * eta - cb_log_partition(eta)


def cb_log_norm(lam):
    """log C(lambda) with C(lambda) = 2 atanh(1 - 2 lambda) / (1 - 2 lambda), C(1/2) = 2."""
    eta = lambda_to_eta(lam)
    # log C = softplus(eta) - A(eta)
    return np.logaddexp(0.0, eta) - cb_log_partition(eta)


def cb_log_pdf(x, lam):
    x = np.asarray(x, dtype=np.float64)
    if np.any((x < 0) | (x > 1)):
        raise ValueError("x must lie in [0, 1]")
    return cb_log_pdf_eta(x, lambda_to_eta(lam))


def cb_mean(lam):
    return cb_mean_eta(lambda_to_eta(lam))


def cb_eta_star(x, iters: int = 100):
    """Natural parameter maximising the cB log-density of x (x clamped to [EPS_X, 1-EPS_X]).

    Solves the exponential-family condition mean(eta) = x by bisection; the
    root is bracketed by [-1/x, 1/(1-x)].
    """
    x = np.clip(np.asarray(x, dtype=np.float64), EPS_X, 1.0 - EPS_X)
    lo = -1.0 / x
    hi = 1.0 / (1.0 - x)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        above = cb_mean_eta(mid) > x
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
    return 0.5 * (lo + hi)


def cb_lambda_star(x):
    """Shape parameter of perfect reconstruction.  May underflow to 0/1 for extreme x;
    use ``cb_eta_star`` when the log-density is needed."""
    return eta_to_lambda(cb_eta_star(x))


def _perfect_log_pdf(x):
    x = np.asarray(x, dtype=np.float64)
    xc = np.clip(x, EPS_X, 1.0 - EPS_X)
    return cb_log_pdf_eta(xc, cb_eta_star(xc))


def _per_sample_sum(values: np.ndarray, batched: bool):
    return values.reshape(values.shape[0], -1).sum(axis=1) if batched else float(values.sum())


def cb_perfect_recon(x):
    """sum_i log p_cB(x_i; lambda*_i) per sample.

    ``x`` is a single HxWxC image or an NxHxWxC batch.  Each distinct pixel
    value is solved once, so 8-bit images cost at most 256 solves and the
    result is bit-identical to solving every pixel.
    """
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 4
    uniq, inverse = np.unique(x, return_inverse=True)
    values = _perfect_log_pdf(uniq)[inverse.reshape(x.shape)]
    return _per_sample_sum(values, batched)


def bernoulli_perfect_recon(x):
    x = np.asarray(x, dtype=np.float64)
    values = xlogy(x, x) + xlogy(1.0 - x, 1.0 - x)
    return _per_sample_sum(values, x.ndim == 4)


# ---------------------------------------------------------------------------
# per-pixel log-likelihoods of decoder outputs (used for training and scoring)
# ---------------------------------------------------------------------------


def clamp_logits(logits, eps_lambda: float = EPS_LAMBDA):
    bound = np.log1p(-eps_lambda) - np.log(eps_lambda)
    return np.clip(logits, -bound, bound)


def bernoulli_log_lik(x, logits):
    """Per-pixel log p and its gradient w.r.t. the logits."""
    x = np.asarray(x, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    ll = x * logits - np.logaddexp(0.0, logits)
    grad = x - 0.5 * (1.0 + np.tanh(0.5 * logits))
    return ll, grad


def cb_log_lik(x, logits, eps_lambda: float = EPS_LAMBDA):
    """Per-pixel cB log p for lambda = clamp(sigmoid(logits)); gradient is zero where clamped."""
    x = np.asarray(x, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    eta = clamp_logits(logits, eps_lambda)
    ll = cb_log_pdf_eta(x, eta)
    grad = np.where(eta == logits, x - cb_mean_eta(eta), 0.0)
    return ll, grad


def to_bytes(x) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.int64)


def categorical_log_lik(x, logits):
    """``logits`` has shape x.shape + (256,).  Returns per-pixel log p and d/dlogits."""
    v = to_bytes(x)
    logp = log_softmax(np.asarray(logits, dtype=np.float64), axis=-1)
    ll = np.take_along_axis(logp, v[..., None], axis=-1)[..., 0]
    grad = -np.exp(logp)
    np.put_along_axis(grad, v[..., None], np.take_along_axis(grad, v[..., None], axis=-1) + 1.0, axis=-1)
    return ll, grad


def categorical_log_pmf(x_byte: int, logits) -> float:
    if not 0 <= int(x_byte) < N_LEVELS:
        raise ValueError("pixel value must be in 0..255")
    return float(log_softmax(np.asarray(logits, dtype=np.float64))[int(x_byte)])


VISIBLE_KINDS = ("bernoulli", "cb", "categorical")


def pixel_log_lik(kind: str, x, logits):
    """Per-pixel log-likelihood and its gradient w.r.t. the decoder logits."""
    if kind == "bernoulli":
        return bernoulli_log_lik(x, logits)
    if kind == "cb":
        return cb_log_lik(x, logits)
    if kind == "categorical":
        return categorical_log_lik(x, logits)
    raise ValueError(f"unknown visible distribution {kind!r}; expected one of {VISIBLE_KINDS}")


@dataclass
class VisibleParams:
    """Decoder output.  ``logits`` are natural parameters: Bernoulli/cB logits of
    shape (N, H, W, C), or categorical logits of shape (N, H, W, C, 256)."""

    kind: str
    logits: np.ndarray

    @property
    def lam(self) -> np.ndarray:
        if self.kind != "cb":
            raise AttributeError("lambda only exists for the continuous Bernoulli")
        return sigmoid(clamp_logits(np.asarray(self.logits, dtype=np.float64)))

    @property
    def mean(self) -> np.ndarray:
        logits = np.asarray(self.logits, dtype=np.float64)
        if self.kind == "bernoulli":
            return sigmoid(logits)
        if self.kind == "cb":
            return cb_mean_eta(clamp_logits(logits))
        probs = np.exp(log_softmax(logits, axis=-1))
        return probs @ (np.arange(N_LEVELS) / 255.0)

    def log_prob(self, x) -> np.ndarray:
        """Per-sample log p(x | params), summed over pixels and channels."""
        ll, _ = pixel_log_lik(self.kind, x, self.logits)
        return ll.reshape(ll.shape[0], -1).sum(axis=1)


# ---------------------------------------------------------------------------
# empirical correction table for the categorical decoder
# ---------------------------------------------------------------------------

_TABLE_MAGIC = b"VOCATCT1"


@dataclass
class CatCorrectionTable:
    """log correction C(v, k); ``table`` has shape (256, nc)."""

    table: np.ndarray
    observed: np.ndarray | None = None

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=np.float64)
        if self.table.ndim != 2 or self.table.shape[0] != N_LEVELS:
            raise ValueError(f"table must be (256, nc), got {self.table.shape}")
        if not np.all(np.isfinite(self.table)):
            raise ValueError("correction table has non-finite entries")

    @property
    def nc(self) -> int:
        return self.table.shape[1]

    def correction(self, x) -> np.ndarray | float:
        """Sum over pixels of C(x_ijk, k), per sample."""
        v = to_bytes(x)
        if v.shape[-1] != self.nc:
            raise ValueError(f"image has {v.shape[-1]} channels, table has {self.nc}")
        vals = self.table[v, np.arange(self.nc)]
        return _per_sample_sum(vals, v.ndim == 4)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(_TABLE_MAGIC)
            fh.write(struct.pack("<I", self.nc))
            fh.write(self.table.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "CatCorrectionTable":
        data = Path(path).read_bytes()
        if data[:8] != _TABLE_MAGIC:
            raise ValueError(f"{path}: not a correction table (bad magic)")
        (nc,) = struct.unpack("<I", data[8:12])
        expected = 12 + N_LEVELS * nc * 8
        if len(data) != expected:
            raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
        table = np.frombuffer(data[12:], dtype="<f8").reshape(N_LEVELS, nc)
        return cls(table.astype(np.float64))

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("value,channel,log_correction\n")
            for v in range(N_LEVELS):
                for k in range(self.nc):
                    fh.write(f"{v},{k},{self.table[v, k]!r}\n")


def build_cat_correction(model, images, batch_size: int = 64, floor: float = LOG_UNIFORM_256) -> CatCorrectionTable:
    """Empirical categorical correction from training images.

    For every sample the decoder is evaluated at the posterior mean; the
    probability given to each pixel's own value is averaged per (value, channel)
    within the sample, those per-sample means are averaged over samples, and the
    log is taken.  Cells never observed get ``floor``.
    """
    images = np.asarray(images)
    if images.ndim != 4 or len(images) == 0:
        raise ValueError("need a non-empty NxHxWxC training set")
    nc = images.shape[-1]
    a_sum = np.zeros((N_LEVELS, nc))
    a_count = np.zeros((N_LEVELS, nc), dtype=np.int64)
    channel = np.arange(nc)
    for start in range(0, len(images), batch_size):
        xb = images[start : start + batch_size]
        mu, _ = model.encode(xb)
        params = model.decode(mu)
        if params.kind != "categorical":
            raise ValueError(f"categorical correction needs a categorical decoder, got {params.kind!r}")
        v = to_bytes(xb)
        logp = log_softmax(np.asarray(params.logits, dtype=np.float64), axis=-1)
        p = np.exp(np.take_along_axis(logp, v[..., None], axis=-1)[..., 0])
        for i in range(len(xb)):
            idx = (v[i] * nc + channel).ravel()
            sums = np.bincount(idx, weights=p[i].ravel(), minlength=N_LEVELS * nc)
            counts = np.bincount(idx, minlength=N_LEVELS * nc)
            seen = counts > 0
            means = np.zeros_like(sums)
            means[seen] = sums[seen] / counts[seen]
            a_sum += means.reshape(N_LEVELS, nc)
            a_count += seen.reshape(N_LEVELS, nc)
    observed = a_count > 0
    table = np.full((N_LEVELS, nc), floor)
    table[observed] = np.log(a_sum[observed] / a_count[observed])
    missing = int((~observed).sum())
    if missing:
        log.warning("%d (value, channel) cells unobserved in training data; set to %.5f", missing, floor)
    return CatCorrectionTable(table, observed)


CORRECTION_METHODS = ("bernoulli", "cb", "categorical")


def perfect_recon_correction(x, method: str, table: CatCorrectionTable | None = None):
    if method == "cb":
        return cb_perfect_recon(x)
    if method == "bernoulli":
        return bernoulli_perfect_recon(x)
    if method == "categorical":
        if table is None:
            raise ValueError("categorical correction needs a table; run build_cat_correction first")
        return table.correction(x)
    raise ValueError(f"unknown correction method {method!r}; expected one of {CORRECTION_METHODS}")


def apply_correction(ll, x, method: str, table: CatCorrectionTable | None = None):
    """Bias-corrected log-likelihood: ll minus the sample's perfect-reconstruction term."""
    return ll - perfect_recon_correction(x, method, table)
