"""Outlier scores from trained VAEs: LL, BC-LL, ensemble variance, WAIC, input complexity."""

from __future__ import annotations

import io
import json
import logging
import math
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .visible import CatCorrectionTable, perfect_recon_correction
from .vae import VaeModel, iwae_ll, iwae_ll_batch

log = logging.getLogger(__name__)

SCORES = ("ll", "bc_ll", "ev_ll", "waic", "ic")
HIGHER_IS_INLIER = "higher-is-inlier"
LOWER_IS_INLIER = "lower-is-inlier"
ORIENTATION = {
    "ll": HIGHER_IS_INLIER,
    "bc_ll": HIGHER_IS_INLIER,
    "ev_ll": LOWER_IS_INLIER,
    "waic": HIGHER_IS_INLIER,
    "ic": HIGHER_IS_INLIER,
}
COMPRESSOR = f"png-idat(zlib {zlib.ZLIB_VERSION}, level 9)"


class ProvenanceMismatch(ValueError):
    pass


class Ensemble:
    """N >= 2 VAEs sharing a configuration apart from seed / data split."""

    def __init__(self, models: list[VaeModel], tables: list[CatCorrectionTable | None] | None = None):
        if len(models) < 2:
            raise ValueError(f"an ensemble needs at least 2 members, got {len(models)}")
        ref = models[0].config
        for m in models[1:]:
            for key in ("nz", "nf", "nc", "visible"):
                if getattr(m.config, key) != getattr(ref, key):
                    raise ValueError(f"ensemble members disagree on {key}")
            if m.meta.get("preprocessing") != models[0].meta.get("preprocessing"):
                raise ValueError("ensemble members were trained with different preprocessing")
        self.models = list(models)
        self.tables = list(tables) if tables is not None else [None] * len(models)

    def __len__(self) -> int:
        return len(self.models)

    @property
    def visible(self) -> str:
        return self.models[0].visible

    @property
    def preprocessing(self) -> str:
        return self.models[0].meta.get("preprocessing", "none")


def member_seed(seed_base, index: int):
    """seed_base + index, applied to the first entry when the seed is a sequence."""
    if isinstance(seed_base, (tuple, list)):
        return [seed_base[0] + index, *seed_base[1:]]
    return seed_base + index


# ---------------------------------------------------------------------------
# single-sample scores
# ---------------------------------------------------------------------------


def correction(model: VaeModel, x, table: CatCorrectionTable | None = None):
    """Perfect-reconstruction term matching the model's visible distribution."""
    if model.visible == "categorical" and table is None:
        raise ValueError("categorical model has no correction table; run build_cat_correction first")
    return perfect_recon_correction(x, model.visible, table)


def score_ll(model: VaeModel, x, K: int = 100, seed=0) -> float:
    return iwae_ll(model, x, K, seed)


def score_bc_ll(model: VaeModel, x, K: int = 100, seed=0, table: CatCorrectionTable | None = None) -> float:
    corr = correction(model, x, table)
    return score_ll(model, x, K, seed) - float(corr)


def member_lls(ensemble: Ensemble, x, K: int = 100, seed_base=0, corrected: bool = True) -> np.ndarray:
    out = np.empty(len(ensemble))
    for i, (m, table) in enumerate(zip(ensemble.models, ensemble.tables)):
        ll = score_ll(m, x, K, member_seed(seed_base, i))
        out[i] = ll - float(correction(m, x, table)) if corrected else ll
    return out


def _require_ensemble(ensemble) -> None:
    if not isinstance(ensemble, Ensemble) or len(ensemble) < 2:
        raise ValueError("ensemble scores need at least 2 members")


def ensemble_variance(values) -> float:
    return float(np.var(np.asarray(values, dtype=np.float64)))


def waic_from_members(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    return float(values.mean() - values.var())


def score_ev(ensemble: Ensemble, x, K: int = 100, seed_base=0, corrected: bool = True) -> float:
    """Population variance of member log-likelihoods (bias-corrected by default)."""
    _require_ensemble(ensemble)
    return ensemble_variance(member_lls(ensemble, x, K, seed_base, corrected))


def score_waic(ensemble: Ensemble, x, K: int = 100, seed_base=0, corrected: bool = True) -> float:
    """Mean minus population variance of the same member LLs used by ``score_ev``."""
    _require_ensemble(ensemble)
    return waic_from_members(member_lls(ensemble, x, K, seed_base, corrected))


def _png_idat_bytes(png: bytes) -> int:
    """Size of the compressed image data in a PNG, without signature and chunk framing."""
    total, off = 0, 8
    while off + 8 <= len(png):
        length, kind = struct.unpack(">I4s", png[off : off + 8])
        if kind == b"IDAT":
            total += length
        off += 12 + length
    return total


def complexity_bits(x) -> int:
    """Bits of losslessly compressed (PNG, max compression) image data for one image."""
    x = np.asarray(x)
    arr = np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG", compress_level=9)
    return 8 * _png_idat_bytes(buf.getvalue())


def complexity_nats(x) -> float:
    """d * L(x) * ln 2, where L(x) = |C(x)| / d is compressed bits per dimension."""
    return complexity_bits(x) * math.log(2.0)


def score_ic(model: VaeModel, x, K: int = 100, seed=0, sign: float = 1.0) -> float | None:
    """LL minus ``sign`` times the compression complexity (in nats); None if compression fails."""
    try:
        comp = complexity_nats(x)
    except Exception as exc:  # compressor failures are not fatal
        log.warning("compression failed: %s", exc)
        return None
    return score_ll(model, x, K, seed) - sign * comp


# ---------------------------------------------------------------------------
# batch scoring
# ---------------------------------------------------------------------------


@dataclass
class ScoreRecord:
    sample_id: int
    dataset: str
    scores: tuple[str, ...]
    member_ll: list[float] = field(default_factory=list)
    member_bc_ll: list[float] | None = None
    ll: float | None = None
    bc_ll: float | None = None
    ev_ll: float | None = None
    waic: float | None = None
    ic: float | None = None
    complexity_nats: float | None = None
    compressor: str | None = None
    ic_sign: float = 1.0

    def to_dict(self) -> dict:
        d = {"id": self.sample_id, "dataset": self.dataset, "member_ll": self.member_ll}
        if self.member_bc_ll is not None:
            d["member_bc_ll"] = self.member_bc_ll
        for name in self.scores:
            d[name] = getattr(self, name)
        if "ic" in self.scores:
            d["complexity_nats"] = self.complexity_nats
            d["compressor"] = self.compressor
            d["ic_sign"] = self.ic_sign
        d["orientation"] = {name: ORIENTATION[name] for name in self.scores}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreRecord":
        scores = tuple(d["orientation"])
        rec = cls(d["id"], d["dataset"], scores, d["member_ll"], d.get("member_bc_ll"))
        for name in scores:
            setattr(rec, name, d[name])
        rec.complexity_nats = d.get("complexity_nats")
        rec.compressor = d.get("compressor")
        rec.ic_sign = d.get("ic_sign", 1.0)
        return rec

    def member_values(self, score: str) -> list[float] | None:
        """Per-member values of a single-model score, for per-member metrics."""
        if score == "ll":
            return self.member_ll
        if score == "bc_ll":
            return self.member_bc_ll
        if score == "ic" and self.complexity_nats is not None:
            return [v - self.ic_sign * self.complexity_nats for v in self.member_ll]
        return None


def _as_members(models):
    if isinstance(models, Ensemble):
        return models.models, models.tables
    if isinstance(models, VaeModel):
        return [models], [None]
    models = list(models)
    return models, [None] * len(models)


def _read_existing(path: Path) -> dict[int, ScoreRecord]:
    done = {}
    if path.exists():
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    rec = ScoreRecord.from_dict(json.loads(line))
                    done[rec.sample_id] = rec
    return done


def score_batch(models, dataset, scores=("ll", "bc_ll"), K: int = 100, seed: int = 0,
                tables=None, ev_corrected: bool = True, ic_sign: float = 1.0,
                allow_provenance_mismatch: bool = False, out_path=None, chunk: int = 64,
                timings: dict | None = None) -> list[ScoreRecord]:
    """Score every sample of ``dataset``; sample j of member i is seeded with (seed + i, j).

    With ``out_path`` records are appended as line-delimited JSON as they are
    produced, and samples already present in the file are not recomputed.
    """
    scores = tuple(scores)
    unknown = set(scores) - set(SCORES)
    if unknown:
        raise ValueError(f"unknown scores {sorted(unknown)}; choose from {SCORES}")
    members, member_tables = _as_members(models)
    if tables is not None:
        member_tables = list(tables)
    if {"ev_ll", "waic"} & set(scores) and len(members) < 2:
        raise ValueError("ev_ll and waic need an ensemble of at least 2 models")
    for m in members:
        trained = m.meta.get("preprocessing", "none")
        if trained != dataset.provenance and not allow_provenance_mismatch:
            raise ProvenanceMismatch(
                f"model trained on '{trained}' data but dataset {dataset.name!r} is '{dataset.provenance}'; "
                "preprocess the data identically or pass allow_provenance_mismatch"
            )
    need_bc = bool({"bc_ll"} & set(scores)) or ({"ev_ll", "waic"} & set(scores) and ev_corrected)
    if need_bc and members[0].visible == "categorical" and any(t is None for t in member_tables):
        raise ValueError("categorical model has no correction table; run build_cat_correction first")

    timings = timings if timings is not None else {}
    for key in ("iwae", "correction", "compression"):
        timings.setdefault(key, 0.0)
    out_path = Path(out_path) if out_path else None
    done = _read_existing(out_path) if out_path else {}
    fh = open(out_path, "a") if out_path else None
    try:
        for start in range(0, len(dataset), chunk):
            ids = [j for j in range(start, min(start + chunk, len(dataset))) if j not in done]
            if not ids:
                continue
            xb = dataset.x[ids]
            t0 = time.perf_counter()
            lls = np.stack([
                iwae_ll_batch(m, xb, K, seeds=[[seed + i, j] for j in ids]) for i, m in enumerate(members)
            ], axis=1)
            timings["iwae"] += time.perf_counter() - t0
            t0 = time.perf_counter()
            corr = None
            if need_bc:
                corr = np.stack([np.asarray(correction(m, xb, t), dtype=np.float64)
                                 for m, t in zip(members, member_tables)], axis=1)
            timings["correction"] += time.perf_counter() - t0
            comp = None
            if "ic" in scores:
                t0 = time.perf_counter()
                comp = []
                for img in xb:
                    try:
                        comp.append(complexity_nats(img))
                    except Exception as exc:
                        log.warning("compression failed: %s", exc)
                        comp.append(None)
                timings["compression"] += time.perf_counter() - t0
            for row, j in enumerate(ids):
                rec = ScoreRecord(j, dataset.name, scores, lls[row].tolist(), ic_sign=ic_sign)
                if corr is not None:
                    rec.member_bc_ll = (lls[row] - corr[row]).tolist()
                if "ll" in scores:
                    rec.ll = float(np.mean(lls[row]))
                if "bc_ll" in scores:
                    rec.bc_ll = float(np.mean(rec.member_bc_ll))
                ev_members = rec.member_bc_ll if ev_corrected and corr is not None else rec.member_ll
                if "ev_ll" in scores:
                    rec.ev_ll = ensemble_variance(ev_members)
                if "waic" in scores:
                    rec.waic = waic_from_members(ev_members)
                if "ic" in scores:
                    rec.compressor = COMPRESSOR
                    if comp[row] is not None:
                        rec.complexity_nats = comp[row]
                        rec.ic = float(np.mean(lls[row])) - ic_sign * comp[row]
                done[j] = rec
                if fh:
                    fh.write(json.dumps(rec.to_dict()) + "\n")
            if fh:
                fh.flush()
    finally:
        if fh:
            fh.close()
    return [done[j] for j in range(len(dataset)) if j in done]


def records_to_csv(records: list[ScoreRecord], path) -> None:
    if not records:
        Path(path).write_text("id,dataset\n")
        return
    scores = records[0].scores
    n = len(records[0].member_ll)
    cols = ["id", "dataset"] + [f"member_ll_{i}" for i in range(n)] + list(scores)
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for r in records:
            vals = [r.sample_id, r.dataset, *r.member_ll, *(getattr(r, s) for s in scores)]
            fh.write(",".join("" if v is None else repr(v) if isinstance(v, float) else str(v) for v in vals) + "\n")


def load_records(path) -> list[ScoreRecord]:
    return list(_read_existing(Path(path)).values())
