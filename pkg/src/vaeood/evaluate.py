"""All-vs-all evaluation grids, affine-perturbation probes and bias sweeps."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as data_mod
from .data import Dataset
from .metrics import LabeledScores, all_metrics, auroc
from .scoring import ORIENTATION, Ensemble, ScoreRecord, correction, score_batch
from .vae import VaeModel, iwae_ll_batch

log = logging.getLogger(__name__)

METRICS = ("auroc", "auprc", "fpr80")
PER_MEMBER_SCORES = ("ll", "bc_ll", "ic")
TIMING_SAMPLES = 500


@dataclass
class EvalReport:
    trains: list[str]
    tests: list[str]
    scores: list[str]
    cells: dict[tuple[str, str, str], dict] = field(default_factory=dict)
    average: dict[tuple[str, str], dict] = field(default_factory=dict)
    timing: dict[str, dict[str, float]] = field(default_factory=dict)

    def cell(self, train: str, test: str, score: str) -> dict:
        return self.cells[(train, test, score)]

    def missing(self) -> list[tuple[str, str, str]]:
        return [
            (tr, te, sc) for tr in self.trains for te in self.tests for sc in self.scores
            if (tr, te, sc) not in self.cells
        ]

    def to_dict(self) -> dict:
        return {
            "trains": self.trains,
            "tests": self.tests,
            "scores": self.scores,
            "cells": [{"train": k[0], "test": k[1], "score": k[2], **v} for k, v in self.cells.items()],
            "average": [{"train": k[0], "score": k[1], **v} for k, v in self.average.items()],
            "timing_seconds_per_500": self.timing,
        }

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def to_csv(self, path) -> None:
        """One block per (score, metric): rows are test sets plus the average row,
        columns are training sets, values formatted as percentages."""
        lines = ["score,metric,test," + ",".join(self.trains)]
        for score in self.scores:
            for metric in METRICS:
                for test in self.tests + ["average"]:
                    row = []
                    for train in self.trains:
                        cell = (self.average.get((train, score)) if test == "average"
                                else self.cells.get((train, test, score)))
                        value = None if cell is None else cell.get(metric)
                        row.append("" if value is None else f"{100.0 * value:.2f}")
                    lines.append(f"{score},{metric},{test}," + ",".join(row))
        Path(path).write_text("\n".join(lines) + "\n")


def _values(records: list[ScoreRecord], score: str, member: int | None):
    if member is None:
        vals = [getattr(r, score) for r in records]
    else:
        vals = []
        for r in records:
            mv = r.member_values(score)
            vals.append(None if mv is None else mv[member])
    if any(v is None for v in vals):
        raise ValueError(f"score {score!r} missing for some samples")
    return np.asarray(vals, dtype=np.float64)


def compare(inlier: list[ScoreRecord], outlier: list[ScoreRecord], score: str) -> dict:
    """Metrics for one (inlier set, outlier set, score) cell; single-model scores
    are evaluated per ensemble member and averaged."""
    orientation = ORIENTATION[score]
    n_members = len(inlier[0].member_ll) if score in PER_MEMBER_SCORES else 1
    members = range(n_members) if score in PER_MEMBER_SCORES else [None]
    per = [all_metrics(LabeledScores(_values(inlier, score, m), _values(outlier, score, m), orientation))
           for m in members]
    out = {}
    for metric in METRICS:
        vals = np.array([p[metric] for p in per])
        out[metric] = float(vals.mean())
        out[f"{metric}_sd"] = float(vals.std())
    out["n_members"] = len(per)
    out["status"] = "ok"
    return out


def build_grid(ensembles: dict, test_sets: dict, scores=("ll", "bc_ll", "ev_ll"), K: int = 100,
               seed: int = 0, tables: dict | None = None, records_dir=None, ev_corrected: bool = True,
               allow_provenance_mismatch: bool = False) -> EvalReport:
    """Score every test set under every training set's ensemble and fill the grid.

    ``test_sets`` maps test name -> Dataset, or train name -> {test name -> Dataset}
    when preprocessing differs per training set.  Each training set's own test
    split must be among the test sets (it is the inlier distribution).
    """
    scores = list(scores)
    trains = list(ensembles)
    per_train = {
        tr: (test_sets[tr] if tr in test_sets and isinstance(test_sets[tr], dict) else test_sets) for tr in trains
    }
    tests = list(dict.fromkeys(name for sets in per_train.values() for name in sets))
    report = EvalReport(trains, tests, scores)
    for tr in trains:
        members = ensembles[tr]
        if members is None:
            raise ValueError(f"no ensemble for training set {tr!r}")
        if tr not in per_train[tr]:
            raise ValueError(f"test sets for {tr!r} lack its own test split (needed as inliers)")
        member_tables = (tables or {}).get(tr)
        timings: dict = {}
        records: dict[str, list[ScoreRecord]] = {}
        n_scored = 0
        for te, ds in per_train[tr].items():
            out_path = Path(records_dir) / f"{tr}__{te}.jsonl" if records_dir else None
            records[te] = score_batch(members, ds, scores, K, seed, tables=member_tables, ev_corrected=ev_corrected,
                                      allow_provenance_mismatch=allow_provenance_mismatch, out_path=out_path,
                                      timings=timings)
            n_scored += len(ds)
        n_members = len(members) if isinstance(members, (list, Ensemble)) else 1
        report.timing[tr] = _timing_per_500(timings, n_members, n_scored, scores)
        for te in per_train[tr]:
            for sc in scores:
                try:
                    report.cells[(tr, te, sc)] = compare(records[tr], records[te], sc)
                except Exception as exc:
                    log.warning("cell (%s, %s, %s) failed: %s", tr, te, sc, exc)
                    report.cells[(tr, te, sc)] = {"status": "failed", "error": str(exc)}
        for sc in scores:
            cells = [report.cells[(tr, te, sc)] for te in per_train[tr] if te != tr]
            good = [c for c in cells if c.get("status") == "ok"]
            if good:
                report.average[(tr, sc)] = {m: float(np.mean([c[m] for c in good])) for m in METRICS}
                report.average[(tr, sc)]["n_tests"] = len(good)
    return report


def _timing_per_500(t: dict, n_members: int, n: int, scores) -> dict[str, float]:
    if n == 0:
        return {}
    scale = TIMING_SAMPLES / n
    single_iwae = t.get("iwae", 0.0) / n_members
    per_score = {
        "ll": single_iwae,
        "bc_ll": single_iwae + t.get("correction", 0.0) / n_members,
        "ev_ll": t.get("iwae", 0.0) + t.get("correction", 0.0),
        "waic": t.get("iwae", 0.0) + t.get("correction", 0.0),
        "ic": single_iwae + t.get("compression", 0.0),
    }
    return {s: per_score[s] * scale for s in scores}


# ---------------------------------------------------------------------------
# affine perturbation probes
# ---------------------------------------------------------------------------

TRANSFORMS = ("identity", "translate", "vflip", "rot90")


def translate(images, seed=0, max_shift: int = 10, shift: tuple[int, int] | None = None) -> np.ndarray:
    """Wrap-around shift, either fixed (dy, dx) or uniform in [-max_shift, max_shift] per axis and sample."""
    images = np.asarray(images)
    if shift is not None:
        return np.roll(images, shift, axis=(1, 2))
    rng = np.random.default_rng(seed)
    shifts = rng.integers(-max_shift, max_shift + 1, size=(len(images), 2))
    return np.stack([np.roll(img, tuple(s), axis=(0, 1)) for img, s in zip(images, shifts)])


def vflip(images) -> np.ndarray:
    """Reflect about the horizontal axis (top row becomes bottom row)."""
    return np.asarray(images)[:, ::-1].copy()


def rot90(images) -> np.ndarray:
    """Rotate 90 degrees anticlockwise."""
    return np.rot90(np.asarray(images), k=1, axes=(1, 2)).copy()


def apply_transform(images, transform: str, seed=0, max_shift: int = 10, shift=None) -> np.ndarray:
    if transform == "identity":
        return np.asarray(images).copy()
    if transform == "translate":
        return translate(images, seed, max_shift, shift)
    if transform == "vflip":
        return vflip(images)
    if transform == "rot90":
        return rot90(images)
    raise ValueError(f"unknown transform {transform!r}; expected one of {TRANSFORMS}")


@dataclass
class ProbeResult:
    transform: str
    original: np.ndarray
    transformed: np.ndarray
    auroc: float

    def to_dict(self) -> dict:
        return {
            "transform": self.transform,
            "auroc": self.auroc,
            "mean_original": float(np.mean(self.original)),
            "mean_transformed": float(np.mean(self.transformed)),
            "original": self.original.tolist(),
            "transformed": self.transformed.tolist(),
        }


def bc_ll_values(models, images, K: int = 100, seed: int = 0, tables=None) -> np.ndarray:
    """BC-LL per image, averaged over members when given several models."""
    if isinstance(models, Ensemble):
        members, tables = models.models, models.tables
    elif isinstance(models, VaeModel):
        members, tables = [models], [tables]
    else:
        members = list(models)
        tables = tables or [None] * len(members)
    images = np.asarray(images)
    out = []
    for i, (m, t) in enumerate(zip(members, tables)):
        ll = iwae_ll_batch(m, images, K, seeds=[[seed + i, j] for j in range(len(images))])
        out.append(ll - np.asarray(correction(m, images, t), dtype=np.float64))
    return np.mean(out, axis=0)


def perturb_probe(models, images, transform: str, K: int = 100, seed: int = 0, tables=None,
                  max_shift: int = 10, shift=None) -> ProbeResult:
    """BC-LL of original vs transformed images and the AUROC separating them
    (originals as inliers)."""
    images = images.x if isinstance(images, Dataset) else np.asarray(images)
    moved = apply_transform(images, transform, seed, max_shift, shift)
    original = bc_ll_values(models, images, K, seed, tables)
    transformed = original.copy() if np.array_equal(moved, images) else bc_ll_values(models, moved, K, seed, tables)
    return ProbeResult(transform, original, transformed, auroc(LabeledScores(original, transformed)))


# ---------------------------------------------------------------------------
# bias sweeps
# ---------------------------------------------------------------------------


def sweep_curve(model: VaeModel, mode: str, n_levels: int = 256, K: int = 100, seed: int = 0,
                base=None, table=None) -> list[dict]:
    """(level, ll, bc_ll) rows for a uniform-intensity or contrast sweep."""
    if mode == "intensity":
        ds = data_mod.simulate_intensity_sweep(n_levels, model.config.nc)
    elif mode == "contrast":
        if base is None:
            raise ValueError("contrast sweep needs a base image")
        ds = data_mod.simulate_contrast_sweep(base, n_levels)
    else:
        raise ValueError(f"unknown sweep mode {mode!r}; expected 'intensity' or 'contrast'")
    ll = iwae_ll_batch(model, ds.x, K, seeds=[[seed, j] for j in range(len(ds))])
    bc = ll - np.asarray(correction(model, ds.x, table), dtype=np.float64)
    return [{"level": float(lv), "ll": float(a), "bc_ll": float(b)} for lv, a, b in zip(ds.meta["levels"], ll, bc)]


def write_curve_csv(rows: list[dict], path) -> None:
    with open(path, "w") as fh:
        fh.write("level,ll,bc_ll\n")
        for r in rows:
            fh.write(f"{r['level']!r},{r['ll']!r},{r['bc_ll']!r}\n")
