"""Convolutional VAE: architecture, ELBO training, IWAE log-likelihood, checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import nn
from .nn import AdamConfig, BatchNorm, Conv2d, Deconv2d, NonFiniteError, ParamStore, ReLU, Sequential, check_finite
from .visible import EPS_LAMBDA, EPS_X, N_LEVELS, VISIBLE_KINDS, VisibleParams, pixel_log_lik

log = logging.getLogger(__name__)

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0
LOG_2PI = math.log(2.0 * math.pi)
CHECKPOINT_MAGIC = b"VAEOODCK"
CHECKPOINT_VERSION = 1
MAX_BAD_BATCHES = 20


@dataclass
class VaeConfig:
    nz: int = 20
    nf: int = 32
    nc: int = 1
    visible: str = "cb"
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 5e-4
    seed: int = 0
    iwae_samples: int = 100

    def __post_init__(self):
        if self.nz < 1 or self.nf < 1 or self.nc < 1:
            raise ValueError("nz, nf and nc must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.iwae_samples < 1:
            raise ValueError("iwae_samples must be >= 1")
        if self.visible not in VISIBLE_KINDS:
            raise ValueError(f"visible must be one of {VISIBLE_KINDS}, got {self.visible!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "VaeConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def out_channels(self) -> int:
        return self.nc * N_LEVELS if self.visible == "categorical" else self.nc


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, model: "VaeModel"):
        super().__init__(message)
        self.model = model


class VaeModel:
    """Encoder/decoder pair laid out as in the DCGAN-style 32x32 architecture.

    Encoder: three stride-2 4x4 convs (nf, 2nf, 4nf) with BN+ReLU, then a valid
    4x4 conv to 2*nz channels (mean, log-variance).  Decoder mirrors it with
    transposed convs (4nf, 2nf, nf, out_channels).
    """

    def __init__(self, config: VaeConfig, dtype=np.float32, meta: dict | None = None):
        self.config = config
        self.store = ParamStore(dtype)
        rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0])
        s, nf, nz, nc = self.store, config.nf, config.nz, config.nc
        self.encoder = Sequential([
            Conv2d(s, "enc.conv1", nc, nf, 2, "same", rng=rng), BatchNorm(s, "enc.bn1", nf), ReLU(),
            Conv2d(s, "enc.conv2", nf, 2 * nf, 2, "same", rng=rng), BatchNorm(s, "enc.bn2", 2 * nf), ReLU(),
            Conv2d(s, "enc.conv3", 2 * nf, 4 * nf, 2, "same", rng=rng), BatchNorm(s, "enc.bn3", 4 * nf), ReLU(),
            Conv2d(s, "enc.conv4", 4 * nf, 2 * nz, 1, "valid", rng=rng),
        ])
        self.decoder = Sequential([
            Deconv2d(s, "dec.deconv1", nz, 4 * nf, 1, "valid", rng=rng), BatchNorm(s, "dec.bn1", 4 * nf), ReLU(),
            Deconv2d(s, "dec.deconv2", 4 * nf, 2 * nf, 2, "same", rng=rng), BatchNorm(s, "dec.bn2", 2 * nf), ReLU(),
            Deconv2d(s, "dec.deconv3", 2 * nf, nf, 2, "same", rng=rng), BatchNorm(s, "dec.bn3", nf), ReLU(),
            Deconv2d(s, "dec.deconv4", nf, config.out_channels, 2, "same", rng=rng),
        ])
        self.meta = {
            "preprocessing": "none",
            "best_val_nll": None,
            "best_epoch": None,
            "val_metric": "negative-elbo",
            "bn_momentum": nn.BN_MOMENTUM,
            "bn_epsilon": nn.BN_EPSILON,
            "eps_lambda": EPS_LAMBDA,
            "eps_x": EPS_X,
            "logvar_clamp": [LOGVAR_MIN, LOGVAR_MAX],
            "categorical_correction_latent": "posterior-mean",
        }
        if meta:
            self.meta.update(meta)
        self.step_losses: list[float] = []

    @property
    def visible(self) -> str:
        return self.config.visible

    # -- forward passes -------------------------------------------------

    def _check_input(self, x):
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[None]
        expected = (32, 32, self.config.nc)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ValueError(f"expected images of shape (N, {expected[0]}, {expected[1]}, {expected[2]}), got {x.shape}")
        return x.astype(self.store.dtype, copy=False)

    def _encoder_out(self, x, train=False, record=False):
        h = self.encoder.forward(self._check_input(x), train, record)
        check_finite(h, "encoder output")
        h = h.reshape(len(h), 2 * self.config.nz).astype(np.float64)
        nz = self.config.nz
        return h[:, :nz], h[:, nz:]

    def encode(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and (clamped) log-variance, eval-mode batchnorm."""
        mu, raw = self._encoder_out(x)
        return mu, np.clip(raw, LOGVAR_MIN, LOGVAR_MAX)

    def _decoder_logits(self, z, train=False, record=False):
        z = np.asarray(z, dtype=np.float64)
        if z.ndim == 1:
            z = z[None]
        if z.shape[1] != self.config.nz:
            raise ValueError(f"latent code must have {self.config.nz} dims, got {z.shape}")
        out = self.decoder.forward(z.reshape(len(z), 1, 1, -1).astype(self.store.dtype), train, record)
        check_finite(out, "decoder output")
        return out

    def _shape_logits(self, out):
        if self.visible == "categorical":
            return out.reshape(out.shape[:3] + (self.config.nc, N_LEVELS))
        return out

    def decode(self, z) -> VisibleParams:
        return VisibleParams(self.visible, self._shape_logits(self._decoder_logits(z)))

    def reconstruct(self, x) -> np.ndarray:
        mu, _ = self.encode(x)
        return self.decode(mu).mean

    # -- objectives -------------------------------------------------------

    def elbo(self, x, seed) -> np.ndarray:
        """Single-sample reparameterised ELBO per sample (closed-form Gaussian KL)."""
        x = self._check_input(x)
        mu, logvar = self.encode(x)
        eps = np.random.default_rng(seed).standard_normal(mu.shape)
        z = nn.reparameterize(mu, logvar, eps)
        rec = self.decode(z).log_prob(x)
        return rec - kl_divergence(mu, logvar)

    def loss_and_grads(self, x, eps: np.ndarray) -> float:
        """Mean negative ELBO of a training batch; gradients accumulate into the store."""
        x = self._check_input(x)
        b, nz = len(x), self.config.nz
        self.store.zero_grad()
        mu, raw = self._encoder_out(x, train=True, record=True)
        logvar = np.clip(raw, LOGVAR_MIN, LOGVAR_MAX)
        std = np.exp(0.5 * logvar)
        z = mu + std * eps
        out = self._decoder_logits(z, train=True, record=True)
        ll, dll = pixel_log_lik(self.visible, x, self._shape_logits(out))
        rec = ll.reshape(b, -1).sum(axis=1)
        kl = kl_divergence(mu, logvar)
        loss = float(np.mean(kl - rec))
        if not math.isfinite(loss):
            raise NonFiniteError("non-finite training loss")
        dout = (-dll / b).reshape(out.shape).astype(self.store.dtype)
        dz = self.decoder.backward(dout).reshape(b, nz).astype(np.float64)
        dmu = dz + mu / b
        dlogvar = dz * eps * 0.5 * std + 0.5 * (np.exp(logvar) - 1.0) / b
        dlogvar = np.where(raw == logvar, dlogvar, 0.0)
        dh = np.concatenate([dmu, dlogvar], axis=1).reshape(b, 1, 1, 2 * nz)
        self.encoder.backward(dh.astype(self.store.dtype))
        return loss


def kl_divergence(mu, logvar) -> np.ndarray:
    """KL(N(mu, exp(logvar)) || N(0, I)) per sample."""
    return 0.5 * np.sum(mu**2 + np.exp(logvar) - 1.0 - logvar, axis=1)


# ---------------------------------------------------------------------------
# marginal likelihood
# ---------------------------------------------------------------------------


def logmeanexp(a, axis=-1):
    a = np.asarray(a, dtype=np.float64)
    m = np.max(a, axis=axis, keepdims=True)
    out = m + np.log(np.mean(np.exp(a - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def _decode_chunk(model: VaeModel) -> int:
    per_z = 32 * 32 * model.config.out_channels
    return int(max(1, min(1024, 2**23 // per_z)))


def log_weights(model: VaeModel, x, K: int, seed) -> np.ndarray:
    """log p(x|z_k) + log p(z_k) - log q(z_k|x) for K posterior draws of one image."""
    if K < 1:
        raise ValueError("K must be >= 1")
    x = model._check_input(x)
    if len(x) != 1:
        raise ValueError("log_weights takes a single image")
    mu, logvar = model.encode(x)
    return _log_weights_from_posterior(model, x, mu[0], logvar[0], K, seed)


def _log_weights_from_posterior(model, x, mu, logvar, K, seed):
    eps = np.random.default_rng(seed).standard_normal((K, model.config.nz))
    z = mu + np.exp(0.5 * logvar) * eps
    log_pz = -0.5 * np.sum(z**2 + LOG_2PI, axis=1)
    log_qz = -0.5 * np.sum(eps**2 + logvar + LOG_2PI, axis=1)
    log_px = np.empty(K)
    step = _decode_chunk(model)
    for start in range(0, K, step):
        zc = z[start : start + step]
        xs = np.broadcast_to(x, (len(zc),) + x.shape[1:])
        log_px[start : start + step] = model.decode(zc).log_prob(xs)
    return log_px + log_pz - log_qz


def iwae_ll(model: VaeModel, x, K: int = 100, seed=0) -> float:
    """Importance-weighted estimate of log p(x) from K posterior samples."""
    return float(logmeanexp(log_weights(model, x, K, seed)))


def iwae_ll_batch(model: VaeModel, images, K: int = 100, seeds=None, batch_size: int = 256) -> np.ndarray:
    """iwae_ll for many images; ``seeds[i]`` seeds image i (default: its index)."""
    images = np.asarray(images)
    if seeds is None:
        seeds = range(len(images))
    seeds = list(seeds)
    out = np.empty(len(images))
    for start in range(0, len(images), batch_size):
        xb = model._check_input(images[start : start + batch_size])
        mu, logvar = model.encode(xb)
        for j in range(len(xb)):
            lw = _log_weights_from_posterior(model, xb[j : j + 1], mu[j], logvar[j], K, seeds[start + j])
            out[start + j] = logmeanexp(lw)
    return out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def negative_elbo(model: VaeModel, images, seed: int = 0, batch_size: int = 256) -> float:
    images = np.asarray(images)
    total = 0.0
    for i, start in enumerate(range(0, len(images), batch_size)):
        total += float(np.sum(-model.elbo(images[start : start + batch_size], seed=[seed, i])))
    return total / len(images)


def train(config: VaeConfig, train_images, val_images, log_path=None, preprocessing: str = "none",
          on_epoch=None) -> VaeModel:
    """Adam-train a VAE and return the checkpoint with the lowest validation NLL.

    Validation NLL is the negative ELBO, evaluated after every epoch.  Batches
    with non-finite values are skipped; too many in a row abort with
    ``TrainingDiverged`` carrying the best model so far.
    """
    train_images = np.asarray(train_images)
    val_images = np.asarray(val_images)
    if len(train_images) == 0 or len(val_images) == 0:
        raise ValueError("training and validation sets must be non-empty")
    if train_images.shape[-1] != config.nc or val_images.shape[-1] != config.nc:
        raise ValueError(f"datasets must have nc={config.nc} channels")
    model = VaeModel(config, meta={"preprocessing": preprocessing})
    _, shuffle_ss, noise_ss = np.random.SeedSequence(config.seed).spawn(3)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    noise_rng = np.random.default_rng(noise_ss)
    adam = AdamConfig(learning_rate=config.learning_rate)
    best_state, best_nll, best_epoch = None, math.inf, None
    history = []
    log_fh = open(log_path, "a") if log_path else None
    step, bad_in_row = 0, 0
    t0 = time.perf_counter()
    try:
        for epoch in range(1, config.epochs + 1):
            perm = shuffle_rng.permutation(len(train_images))
            losses, skipped = [], 0
            for start in range(0, len(perm), config.batch_size):
                idx = perm[start : start + config.batch_size]
                if len(idx) < 2:
                    continue
                xb = train_images[np.sort(idx)]
                eps = noise_rng.standard_normal((len(idx), config.nz))
                try:
                    loss = model.loss_and_grads(xb, eps)
                    nn.adam_step(model.store, adam, step + 1)
                except NonFiniteError as exc:
                    skipped += 1
                    bad_in_row += 1
                    log.warning("epoch %d: skipping batch at %d: %s", epoch, start, exc)
                    if bad_in_row >= MAX_BAD_BATCHES:
                        raise
                    continue
                step += 1
                bad_in_row = 0
                losses.append(loss)
                model.step_losses.append(loss)
            val_nll = negative_elbo(model, val_images, seed=config.seed)
            record = {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)) if losses else None,
                "val_nll": val_nll,
                "skipped_batches": skipped,
                "wall_clock": time.perf_counter() - t0,
            }
            history.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            log.info("epoch %d train %.3f val %.3f", epoch, record["train_loss"] or float("nan"), val_nll)
            if not math.isfinite(val_nll):
                raise NonFiniteError(f"validation NLL is {val_nll} at epoch {epoch}")
            if val_nll < best_nll:
                best_nll, best_epoch, best_state = val_nll, epoch, model.store.copy_state()
            if on_epoch:
                on_epoch(model, record)
    except NonFiniteError as exc:
        if best_state is not None:
            model.store.load_state(best_state)
        model.meta.update(best_val_nll=best_nll, best_epoch=best_epoch, history=history)
        raise TrainingDiverged(f"training diverged: {exc}", model) from exc
    finally:
        if log_fh:
            log_fh.close()
    model.store.load_state(best_state)
    model.meta.update(best_val_nll=best_nll, best_epoch=best_epoch, history=history)
    return model


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: VaeModel, path) -> None:
    """magic | u16 version | u32 len + JSON metadata | u32 count | tensors | sha256."""
    meta = {"config": asdict(model.config), "meta": model.meta}
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION), struct.pack("<I", len(meta_bytes)), meta_bytes]
    state = model.store.state()
    parts.append(struct.pack("<I", len(state)))
    for name, arr in state.items():
        encoded = name.encode()
        parts.append(struct.pack("<HB", len(encoded), arr.ndim) + encoded)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def load_checkpoint(path) -> VaeModel:
    data = Path(path).read_bytes()
    if len(data) < 48 or data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a VAE checkpoint")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (file corrupted)")
    (version,) = struct.unpack_from("<H", body, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    (meta_len,) = struct.unpack_from("<I", body, 10)
    off = 14
    header = json.loads(body[off : off + meta_len])
    off += meta_len
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    state = {}
    for _ in range(count):
        name_len, ndim = struct.unpack_from("<HB", body, off)
        off += 3
        name = body[off : off + name_len].decode()
        off += name_len
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        n = int(np.prod(shape, dtype=np.int64))
        state[name] = np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
    model = VaeModel(VaeConfig.from_dict(header["config"]), meta=header["meta"])
    model.store.load_state(state)
    return model
