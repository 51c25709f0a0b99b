"""Command-line driver: ingest, train, build-correction, score, evaluate, probe, sweep.

Every subcommand writes its artifacts plus ``run_manifest.json`` (arguments,
seeds, package versions, input checksums) into the ``--out`` directory.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import logging
import platform
import sys
from importlib import metadata
from pathlib import Path


from . import data as data_mod
from . import evaluate as ev
from .data import Dataset, IdxFormatError
from .scoring import SCORES, Ensemble, ProvenanceMismatch, records_to_csv, score_batch
from .vae import CheckpointError, TrainingDiverged, VaeConfig, load_checkpoint, save_checkpoint, train
from .visible import CatCorrectionTable, build_cat_correction

log = logging.getLogger("vaeood")


class CliError(Exception):
    """A user-facing failure; the message says what to fix."""


# ---------------------------------------------------------------------------
# run bookkeeping
# ---------------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for dist in ("artifact", "numpy", "scipy", "pillow"):
        try:
            out[dist] = metadata.version(dist)
        except metadata.PackageNotFoundError:
            out[dist] = None
    return out


class Run:
    def __init__(self, command: str, args: argparse.Namespace):
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = {
            "command": command,
            "args": {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"},
            "seeds": {},
            "versions": _versions(),
            "inputs": {},
            "outputs": [],
            "started": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        }

    def input(self, path) -> Path:
        p = Path(path)
        if not p.exists():
            raise CliError(f"input not found: {p}")
        if p.is_file():
            self.manifest["inputs"][str(p)] = sha256_file(p)
        return p

    def output(self, name: str) -> Path:
        self.manifest["outputs"].append(name)
        return self.out / name

    def finish(self) -> None:
        self.manifest["finished"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
        (self.out / "run_manifest.json").write_text(json.dumps(self.manifest, indent=2, default=str))


def _read_json(run: Run, path) -> dict:
    p = run.input(path)
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"{p}: invalid JSON ({exc})") from exc


def load_dataset(run: Run, ref) -> Dataset:
    """A dataset reference is an ingested .npz file, a JSON manifest entry file,
    or (inside grid files) an inline manifest entry."""
    if isinstance(ref, dict):
        base = Path(ref.pop("_base", "."))
        for p in ref.get("paths", []):
            run.input(base / p)
        return data_mod.load_manifest(ref, base)
    p = run.input(ref)
    if p.suffix == ".npz":
        return Dataset.load(p)
    if p.suffix == ".json":
        spec = json.loads(p.read_text())
        spec["_base"] = str(p.parent)
        return load_dataset(run, spec)
    raise CliError(f"{p}: expected an ingested .npz dataset or a .json manifest entry")


def _load_models(run: Run, paths) -> list:
    return [load_checkpoint(run.input(p)) for p in paths]


def _load_tables(run: Run, paths, n: int):
    if not paths:
        return [None] * n
    if len(paths) != n:
        raise CliError(f"got {len(paths)} correction tables for {n} models; pass one per model")
    return [CatCorrectionTable.load(run.input(p)) for p in paths]


def _match_provenance(ds: Dataset, mode: str, allow: bool) -> Dataset:
    if ds.provenance == mode:
        return ds
    if ds.provenance == "none":
        return data_mod.preprocess(ds, mode)
    if allow:
        return ds
    raise ProvenanceMismatch(
        f"dataset {ds.name!r} was preprocessed with '{ds.provenance}' but the model expects '{mode}'; "
        "ingest it without preprocessing or with the same preprocessing"
    )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_ingest(args, run: Run) -> None:
    spec = _read_json(run, args.manifest)
    entries = spec.get("datasets", [spec]) if isinstance(spec, dict) else spec
    base = Path(args.manifest).parent
    for entry in entries:
        entry = dict(entry)
        entry["_base"] = str(base)
        ds = load_dataset(run, entry)
        out = run.output(f"{ds.name}.npz")
        ds.save(out)
        print(f"{ds.name}: {len(ds)} images, nc={ds.nc}, provenance={ds.provenance} -> {out}")


def _config_ref(ref, base: Path):
    if isinstance(ref, dict):
        return {**ref, "_base": str(base)}
    return base / ref


def cmd_train(args, run: Run) -> None:
    cfg_dict = _read_json(run, args.config)
    base = Path(args.config).parent
    data_ref, val_ref = cfg_dict.pop("data", None), cfg_dict.pop("val", None)
    data_ref = args.data if args.data is not None else data_ref and _config_ref(data_ref, base)
    val_ref = args.val if args.val is not None else val_ref and _config_ref(val_ref, base)
    preprocessing = cfg_dict.pop("preprocessing", None)
    if args.seed is not None:
        cfg_dict["seed"] = args.seed
    if args.epochs is not None:
        cfg_dict["epochs"] = args.epochs
    config = VaeConfig.from_dict(cfg_dict)
    if data_ref is None:
        raise CliError("no training data: pass --data or set 'data' in the config")
    ds = load_dataset(run, data_ref)
    if preprocessing is not None:
        ds = _match_provenance(ds, preprocessing, allow=False)
    if val_ref is not None:
        val = _match_provenance(load_dataset(run, val_ref), ds.provenance, allow=False)
    if ds.nc != config.nc:
        raise CliError(f"dataset {ds.name!r} has {ds.nc} channels but config.nc={config.nc}")
    (run.output("config.json")).write_text(json.dumps(vars(config), indent=2))
    seeds = []
    for i in range(args.members):
        member_cfg = VaeConfig.from_dict({**vars(config), "seed": config.seed + i})
        if val_ref is None:
            tr, va = data_mod.split(ds, args.val_fraction, seed=member_cfg.seed)
        else:
            tr, va = ds, val
        sub = "" if args.members == 1 else f"member_{i}/"
        (run.out / sub).mkdir(parents=True, exist_ok=True)
        log_path = run.output(f"{sub}train_log.jsonl")
        try:
            model = train(member_cfg, tr.x, va.x, log_path=log_path, preprocessing=ds.provenance)
        except TrainingDiverged as exc:
            save_checkpoint(exc.model, run.output(f"{sub}model.partial.ckpt"))
            raise CliError(f"training diverged ({exc}); best state so far saved to {sub}model.partial.ckpt; "
                           "try a smaller learning rate") from exc
        model.meta["train_dataset"] = ds.name
        save_checkpoint(model, run.output(f"{sub}model.ckpt"))
        seeds.append(member_cfg.seed)
        print(f"member {i}: best val NLL {model.meta.get('best_val_nll'):.3f} at epoch {model.meta.get('best_epoch')}")
    run.manifest["seeds"] = {"train": seeds, "split": seeds if val_ref is None else None}


def cmd_build_correction(args, run: Run) -> None:
    model = load_checkpoint(run.input(args.model))
    if model.visible != "categorical":
        raise CliError(f"model visible distribution is '{model.visible}'; correction tables are only for categorical")
    ds = _match_provenance(load_dataset(run, args.data), model.meta.get("preprocessing", "none"),
                           args.allow_provenance_mismatch)
    table = build_cat_correction(model, ds.x, batch_size=args.batch_size)
    table.save(run.output("correction.bin"))
    table.to_csv(run.output("correction.csv"))
    print(f"table built from {len(ds)} images; {int((~table.observed).sum())} unobserved cells floored")


def _scores(arg: str) -> list[str]:
    out = [s.strip() for s in arg.split(",") if s.strip()]
    bad = [s for s in out if s not in SCORES]
    if bad:
        raise CliError(f"unknown scores {bad}; choose from {', '.join(SCORES)}")
    return out


def cmd_score(args, run: Run) -> None:
    models = _load_models(run, args.models)
    tables = _load_tables(run, args.tables, len(models))
    ds = load_dataset(run, args.data)
    mode = models[0].meta.get("preprocessing", "none")
    ds = _match_provenance(ds, mode, args.allow_provenance_mismatch)
    members = Ensemble(models, tables) if len(models) > 1 else models
    timings: dict = {}
    records = score_batch(members, ds, _scores(args.scores), args.K, args.seed, tables=tables,
                          ev_corrected=not args.ev_raw, ic_sign=args.ic_sign,
                          allow_provenance_mismatch=args.allow_provenance_mismatch,
                          out_path=run.output("scores.jsonl"), timings=timings)
    records_to_csv(records, run.output("scores.csv"))
    run.manifest["seeds"] = {"iwae": [[args.seed + i, "sample index"] for i in range(len(models))]}
    run.manifest["timings"] = timings
    print(f"scored {len(records)} samples of {ds.name!r}")


def cmd_evaluate(args, run: Run) -> None:
    grid = _read_json(run, args.grid)
    base = Path(args.grid).parent
    for key in ("trains", "tests"):
        if key not in grid:
            raise CliError(f"grid file lacks '{key}'")
    scores = grid.get("scores", ["ll", "bc_ll", "ev_ll"])
    K = int(grid.get("K", args.K))
    seed = int(grid.get("seed", args.seed))
    raw_tests = {}
    for name, ref in grid["tests"].items():
        ref = {**ref, "_base": str(base)} if isinstance(ref, dict) else base / ref
        raw_tests[name] = load_dataset(run, ref)
    ensembles, tables, tests = {}, {}, {}
    for tr, entry in grid["trains"].items():
        models = _load_models(run, [base / p for p in entry.get("models", [])])
        if not models:
            raise CliError(f"training set {tr!r} lists no models")
        tabs = _load_tables(run, [base / p for p in entry.get("tables", [])], len(models))
        ensembles[tr] = Ensemble(models, tabs) if len(models) > 1 else models
        tables[tr] = tabs
        mode = models[0].meta.get("preprocessing", "none")
        tests[tr] = {te: _match_provenance(ds, mode, args.allow_provenance_mismatch) for te, ds in raw_tests.items()}
    records_dir = run.out / "scores"
    records_dir.mkdir(exist_ok=True)
    report = ev.build_grid(ensembles, tests, scores, K, seed, tables, records_dir=records_dir,
                           ev_corrected=not args.ev_raw, allow_provenance_mismatch=args.allow_provenance_mismatch)
    report.to_json(run.output("report.json"))
    report.to_csv(run.output("report.csv"))
    run.manifest["seeds"] = {"iwae_base": seed}
    failed = [k for k, c in report.cells.items() if c.get("status") != "ok"]
    print(f"grid {len(report.trains)} train x {len(report.tests)} test x {len(scores)} scores; {len(failed)} failed cells")


def cmd_probe(args, run: Run) -> None:
    models = _load_models(run, args.models)
    tables = _load_tables(run, args.tables, len(models))
    ds = _match_provenance(load_dataset(run, args.data), models[0].meta.get("preprocessing", "none"),
                           args.allow_provenance_mismatch)
    shift = tuple(args.shift) if args.shift else None
    result = ev.perturb_probe(models, ds, args.transform, args.K, args.seed, tables, args.max_shift, shift)
    run.output("probe.json").write_text(json.dumps(result.to_dict(), indent=2))
    run.manifest["seeds"] = {"iwae_base": args.seed, "translate": args.seed}
    print(f"{args.transform}: mean BC-LL {result.original.mean():.2f} -> {result.transformed.mean():.2f}, "
          f"AUROC {result.auroc:.4f}")


def cmd_sweep(args, run: Run) -> None:
    model = load_checkpoint(run.input(args.model))
    table = CatCorrectionTable.load(run.input(args.table)) if args.table else None
    base = None
    if args.mode == "contrast":
        if not args.base:
            raise CliError("--mode contrast needs --base DATASET (and optionally --index)")
        base = load_dataset(run, args.base).x[args.index]
    rows = ev.sweep_curve(model, args.mode, args.levels, args.K, args.seed, base, table)
    ev.write_curve_csv(rows, run.output("sweep.csv"))
    run.manifest["seeds"] = {"iwae": args.seed}
    print(f"{len(rows)} sweep levels written")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vaeood", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--out", required=True, type=Path, help="run directory for artifacts")
        sp.set_defaults(func=func)
        return sp

    def scoring_flags(sp, k_default=100):
        sp.add_argument("--K", type=int, default=k_default, help="importance samples per IWAE estimate")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--allow-provenance-mismatch", action="store_true")

    sp = add("ingest", cmd_ingest, "load datasets from a manifest into .npz files")
    sp.add_argument("--manifest", required=True, type=Path)

    sp = add("train", cmd_train, "train one VAE or an ensemble")
    sp.add_argument("--config", required=True, type=Path, help="JSON with model/training fields, optional 'data'")
    sp.add_argument("--data", type=Path, help="training dataset (.npz or manifest .json)")
    sp.add_argument("--val", type=Path, help="validation dataset; default is a held-out split of --data")
    sp.add_argument("--val-fraction", type=float, default=0.10)
    sp.add_argument("--members", type=int, default=1, help="train this many members with consecutive seeds")
    sp.add_argument("--seed", type=int, help="override config seed")
    sp.add_argument("--epochs", type=int, help="override config epochs")

    sp = add("build-correction", cmd_build_correction, "build the categorical correction table")
    sp.add_argument("--model", required=True, type=Path)
    sp.add_argument("--data", required=True, type=Path)
    sp.add_argument("--batch-size", type=int, default=64)
    sp.add_argument("--allow-provenance-mismatch", action="store_true")

    sp = add("score", cmd_score, "score a dataset with one model or an ensemble")
    sp.add_argument("--models", required=True, nargs="+", type=Path)
    sp.add_argument("--tables", nargs="*", type=Path, default=[])
    sp.add_argument("--data", required=True, type=Path)
    sp.add_argument("--scores", default="ll,bc_ll")
    sp.add_argument("--ev-raw", action="store_true", help="ensemble variance on uncorrected LLs")
    sp.add_argument("--ic-sign", type=float, default=1.0, choices=[1.0, -1.0])
    scoring_flags(sp)

    sp = add("evaluate", cmd_evaluate, "all-vs-all AUROC/AUPRC/FPR grid")
    sp.add_argument("--grid", required=True, type=Path, help="JSON with 'trains', 'tests', 'scores', 'K', 'seed'")
    sp.add_argument("--ev-raw", action="store_true")
    scoring_flags(sp)

    sp = add("probe", cmd_probe, "affine-perturbation probe")
    sp.add_argument("--models", required=True, nargs="+", type=Path)
    sp.add_argument("--tables", nargs="*", type=Path, default=[])
    sp.add_argument("--data", required=True, type=Path)
    sp.add_argument("--transform", required=True, choices=ev.TRANSFORMS)
    sp.add_argument("--max-shift", type=int, default=10)
    sp.add_argument("--shift", type=int, nargs=2, metavar=("DY", "DX"), help="fixed translation instead of random")
    scoring_flags(sp)

    sp = add("sweep", cmd_sweep, "likelihood curve over uniform intensity or contrast")
    sp.add_argument("--mode", required=True, choices=("intensity", "contrast"))
    sp.add_argument("--model", required=True, type=Path)
    sp.add_argument("--table", type=Path)
    sp.add_argument("--levels", type=int, default=256)
    sp.add_argument("--base", type=Path, help="dataset holding the base image for contrast sweeps")
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--K", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    return p


USER_ERRORS = (CliError, ValueError, OSError, CheckpointError, IdxFormatError, ProvenanceMismatch, KeyError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        run = Run(args.command, args)
        args.func(args, run)
        run.finish()
    except USER_ERRORS as exc:
        kind = "" if isinstance(exc, CliError) else f"{type(exc).__name__}: "
        print(f"vaeood {args.command}: error: {kind}{exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
