"""Command-line interface: dataset, train, sample, eval, classify, plot."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import load_run_config
from .dataio import (
    DEFAULT_MESH_POINTS,
    SHAPE_KINDS,
    LabeledCloudDataset,
    ParseError,
    load_off,
    make_splits,
    make_synthetic_dataset,
    normalize_cloud,
    read_manifest,
    read_xyz,
    sample_mesh_surface,
    write_manifest,
    write_xyz,
)
from .metrics import CostGuardError, full_report
from .netcore import ContractViolation, NonFiniteError
from .plot import render_svg
from .trainer import CheckpointError, ConfigError, Trainer, evaluate_classifier, predict_proba

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
OUTPUT_ENV = "POINTJEM_OUTPUT_DIR"

log = logging.getLogger("pointjem")


class UsageError(Exception):
    pass


def default_output_dir() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "pointjem-out"))


def _ensure_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc.strerror}") from exc
    if not os.access(path, os.W_OK):
        raise UsageError(f"output directory {path} is not writable")
    return path


def _write_text(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc.strerror}") from exc


def _xyz_files(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise UsageError(f"not a directory: {directory}")
    files = sorted(directory.glob("*.xyz"))
    if not files:
        raise UsageError(f"no .xyz files in {directory}")
    return files


def _read_clouds(files) -> np.ndarray:
    clouds = [read_xyz(f) for f in files]
    sizes = {len(c) for c in clouds}
    if len(sizes) > 1:
        raise UsageError(f"clouds have differing point counts {sorted(sizes)}")
    return np.stack(clouds)


# dataset ---------------------------------------------------------------

def _off_dataset(root: Path, n_points: int, seed: int, train_fraction: float):
    if not root.is_dir():
        raise UsageError(f"OFF directory not found: {root}")
    rng = np.random.default_rng(seed)
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise UsageError(f"no class subdirectories in {root}")
    names = [d.name for d in class_dirs]
    presplit = {"train": [], "test": []}
    loose = []
    for label, d in enumerate(class_dirs):
        split_dirs = [d / s for s in ("train", "test") if (d / s).is_dir()]
        if split_dirs:
            for s in split_dirs:
                for f in sorted(s.glob("*.off")):
                    presplit[s.name].append((f, label))
        else:
            loose.extend((f, label) for f in sorted(d.glob("*.off")))
    items = presplit["train"] + presplit["test"] + loose
    if not items:
        raise UsageError(f"no .off meshes under {root}")
    clouds = np.stack([normalize_cloud(sample_mesh_surface(load_off(f), n_points, rng)) for f, _ in items])
    labels = np.array([l for _, l in items])
    files = [f"{names[l]}/{f.stem}" for f, l in items]
    ds = LabeledCloudDataset(clouds, labels, names, "all", files)
    if loose:
        return make_splits(ds, train_fraction, rng=seed)
    n_tr = len(presplit["train"])
    return ds.subset(range(n_tr), "train"), ds.subset(range(n_tr, len(items)), "test")


def cmd_dataset(args) -> int:
    out = _ensure_dir(Path(args.out) if args.out else default_output_dir() / "dataset")
    if args.off_dir:
        n = args.points or DEFAULT_MESH_POINTS
        train, test = _off_dataset(Path(args.off_dir), n, args.seed, args.train_fraction)
        source = f"off:{args.off_dir}"
    else:
        if not 1 <= args.synthetic <= len(SHAPE_KINDS):
            raise UsageError(f"--synthetic takes 1..{len(SHAPE_KINDS)} classes")
        n = args.points or 256
        ds = make_synthetic_dataset(SHAPE_KINDS[:args.synthetic], args.per_class, n, args.jitter,
                                    rotate=not args.no_rotate, seed=args.seed)
        ds = dataclasses.replace(ds, files=[f"{ds.class_names[l]}/{ds.class_names[l]}_{i:05d}"
                                            for i, l in enumerate(ds.labels)])
        train, test = make_splits(ds, args.train_fraction, rng=args.seed)
        source = "synthetic"
    splits = {}
    for part in (train, test):
        entries = []
        for cloud, label, stem in zip(part.clouds, part.labels, part.files):
            rel = f"clouds/{stem}.xyz"
            (out / rel).parent.mkdir(parents=True, exist_ok=True)
            write_xyz(cloud, out / rel)
            entries.append((rel, int(label)))
        splits[part.split] = entries
        _write_text(out / f"{part.split}.txt", "".join(f"{f}\n" for f, _ in entries))
    write_manifest(out / "manifest.json", train.class_names, splits, n, args.seed, source=source)
    total = len(train) + len(test)
    print(f"wrote {total} clouds ({len(train)} train, {len(test)} test, "
          f"{len(train.class_names)} classes, {n} points) to {out}")
    return EXIT_OK


# train -----------------------------------------------------------------

def cmd_train(args) -> int:
    cfg_path = Path(args.config)
    if not cfg_path.is_file():
        raise UsageError(f"config file not found: {cfg_path}")
    manifest_doc = None
    try:
        run = load_run_config(cfg_path)
        manifest_doc = read_manifest(run.manifest)
    except FileNotFoundError as exc:
        raise UsageError(f"manifest not found: {exc.filename}") from exc
    fill = {}
    if "n_classes" not in run.train_section:
        fill["n_classes"] = len(manifest_doc["class_names"])
    if "n_points" not in run.train_section:
        fill["n_points"] = manifest_doc["n_points"]
    cfg = run.train.with_overrides(**fill) if fill else run.train
    overrides = {}
    if args.sam is not None:
        overrides["sam"] = dataclasses.replace(cfg.sam, enabled=args.sam == "on")
    if args.activation is not None:
        overrides["activation"] = args.activation
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    if cfg.n_classes != len(manifest_doc["class_names"]) or cfg.n_points != manifest_doc["n_points"]:
        raise UsageError(
            f"config expects {cfg.n_classes} classes x {cfg.n_points} points; manifest has "
            f"{len(manifest_doc['class_names'])} x {manifest_doc['n_points']}"
        )

    out = _ensure_dir(Path(args.out) if args.out else run.output_dir or default_output_dir() / "run")
    _, train = read_manifest(run.manifest, "train")
    test = None
    if "test" in manifest_doc["splits"] and manifest_doc["splits"]["test"]:
        _, test = read_manifest(run.manifest, "test")

    records_path = out / "records.ndjson"
    sink_file = open(records_path, "a" if args.resume else "w")

    def sink(rec):
        sink_file.write(rec.to_json() + "\n")
        sink_file.flush()

    if args.resume:
        trainer = Trainer.load(args.resume, record_sink=sink)
        if trainer.config.n_points != cfg.n_points or trainer.config.n_classes != cfg.n_classes:
            raise UsageError(f"checkpoint {args.resume} does not match the dataset shape")
        # the epoch target comes from the current config and flags
        trainer.config = trainer.config.with_overrides(epochs=cfg.epochs)
        print(f"resuming at step {trainer.step}, epoch {trainer.epoch}")
    else:
        trainer = Trainer(cfg, record_sink=sink)
    trainer.class_names = list(train.class_names)
    _write_text(out / "config.json", json.dumps(
        {"schema_version": 1, "dataset": {"manifest": str(run.manifest)},
         "train": trainer.config.to_dict(), "output_dir": str(out)}, indent=2) + "\n")
    ckpt_dir = out / "checkpoints"
    every = trainer.config.checkpoint_every

    def on_epoch_end(t):
        msg = f"epoch {t.epoch}/{t.config.epochs} step {t.step} divergences {t.divergences}"
        if t.records:
            r = t.records[-1]
            msg += f" l_clf {r.l_clf:.4f} l_gen {r.l_gen:.4f}"
        print(msg, flush=True)
        if every and t.epoch % every == 0:
            ckpt_dir.mkdir(exist_ok=True)
            t.save(ckpt_dir / f"epoch-{t.epoch:04d}.npz")

    try:
        trainer.fit(train.clouds, train.labels, on_epoch_end=on_epoch_end)
    finally:
        sink_file.close()
    trainer.save(out / "model.npz")
    if test is not None:
        acc, which = evaluate_classifier(trainer.params, test.clouds, test.labels), "test"
    else:
        acc, which = evaluate_classifier(trainer.params, train.clouds, train.labels), "train"
    summary = {"accuracy": acc, "split": which, "divergences": trainer.divergences,
               "steps": trainer.step, "epochs": trainer.epoch}
    _write_text(out / "summary.json", json.dumps(summary, indent=2) + "\n")
    print(f"final {which} accuracy {acc:.4f} divergences {trainer.divergences} model {out / 'model.npz'}")
    return EXIT_OK


# sample ----------------------------------------------------------------

def _load_model(path) -> Trainer:
    if not Path(path).is_file():
        raise UsageError(f"model file not found: {path}")
    return Trainer.load(path)


def cmd_sample(args) -> int:
    trainer = _load_model(args.model)
    names = trainer.class_names or [str(i) for i in range(trainer.config.n_classes)]
    target = None
    if args.cls is not None:
        if args.cls not in names:
            raise UsageError(f"unknown class {args.cls!r}; valid classes: {', '.join(names)}")
        target = names.index(args.cls)
    if not 0.0 <= args.threshold <= 1.0:
        raise UsageError("--threshold must lie in [0, 1]")
    out = _ensure_dir(Path(args.out) if args.out else default_output_dir() / "samples")
    trainer.rng = np.random.default_rng(args.seed)
    res = trainer.generate(args.count, args.threshold, target, from_buffer=not args.from_prior,
                           n_steps=args.steps, max_attempts=args.max_attempts)
    meta = []
    for i, s in enumerate(res.samples):
        name = f"sample_{i:04d}.xyz"
        write_xyz(s.cloud, out / name)
        meta.append({"file": name, "label": s.label, "class": names[s.label], "confidence": s.confidence})
    doc = {"samples": meta, "requested": args.count, "attempts": res.attempts,
           "exhausted": res.exhausted, "diverged_chains": res.diverged_chains,
           "threshold": args.threshold, "seed": args.seed}
    _write_text(out / "samples.json", json.dumps(doc, indent=2) + "\n")
    if res.exhausted:
        print(f"warning: budget exhausted after {res.attempts} chains; "
              f"wrote {len(meta)} of {args.count} samples", file=sys.stderr)
    print(f"wrote {len(meta)} samples to {out}")
    return EXIT_OK


# eval ------------------------------------------------------------------

def _clouds_from(path: Path, split: str) -> np.ndarray:
    # a manifest stands for one of its splits, anything else is a directory of .xyz files
    if path.is_file() and path.suffix == ".json":
        _, ds = read_manifest(path, split)
        return ds.clouds
    return _read_clouds(_xyz_files(path))


def cmd_eval(args) -> int:
    gen = _clouds_from(Path(args.generated), args.split)
    ref = _clouds_from(Path(args.reference), args.split)
    if gen.shape[1] != ref.shape[1]:
        raise UsageError(f"point counts differ: generated {gen.shape[1]}, reference {ref.shape[1]}")
    try:
        report = full_report(gen, ref, emd_mode=args.emd, resolution=args.resolution, force=args.force)
    except CostGuardError as exc:
        raise UsageError(str(exc)) from exc
    doc = report.to_dict()
    doc["provenance"].update(generated=str(args.generated), reference=str(args.reference))
    text = json.dumps(doc, indent=2) + "\n"
    if args.out:
        out = Path(args.out)
    elif Path(args.generated).is_dir():
        out = Path(args.generated) / "metrics.json"
    else:
        out = Path(args.generated).with_name("metrics.json")
    _write_text(out, text)
    sys.stdout.write(text)
    return EXIT_OK


# classify --------------------------------------------------------------

def cmd_classify(args) -> int:
    trainer = _load_model(args.model)
    cloud = read_xyz(args.cloud)
    n = trainer.config.n_points
    if len(cloud) != n:
        raise UsageError(f"{args.cloud} has {len(cloud)} points; the model expects {n}")
    p = predict_proba(trainer.params, cloud[None])[0]
    k = int(np.argmax(p))
    names = trainer.class_names or [str(i) for i in range(len(p))]
    if args.json:
        print(json.dumps({"class": names[k], "label": k, "confidence": float(p[k]),
                          "probabilities": dict(zip(names, map(float, p)))}))
    else:
        print(f"{names[k]} {p[k]:.6f}")
    return EXIT_OK


# plot ------------------------------------------------------------------

def cmd_plot(args) -> int:
    if not args.files:
        raise UsageError("no cloud files given")
    clouds = [read_xyz(f) for f in args.files]
    svg = render_svg(clouds, [Path(f).name for f in args.files])
    _write_text(Path(args.out), svg)
    print(f"wrote {args.out}")
    return EXIT_OK


# wiring ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pointjem", description="Energy-based point cloud classifier and generator.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP threads (1 = reproducible)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("dataset", help="synthesize shapes or ingest OFF meshes")
    src = d.add_mutually_exclusive_group(required=True)
    src.add_argument("--synthetic", type=int, metavar="K", help="number of synthetic shape classes")
    src.add_argument("--off-dir", help="directory of <class>/[train|test/]*.off meshes")
    d.add_argument("--per-class", type=int, default=200)
    d.add_argument("--points", type=int, default=None, help="points per cloud (256 synthetic, 2048 mesh)")
    d.add_argument("--jitter", type=float, default=0.01)
    d.add_argument("--no-rotate", action="store_true")
    d.add_argument("--train-fraction", type=float, default=0.8)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out")
    d.set_defaults(func=cmd_dataset)

    t = sub.add_parser("train", help="train from a run-config JSON")
    t.add_argument("config")
    t.add_argument("--sam", choices=("on", "off"))
    t.add_argument("--activation", choices=("relu", "leaky_relu", "celu"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", metavar="CHECKPOINT")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate confidence-filtered clouds")
    s.add_argument("model")
    s.add_argument("--count", type=int, default=10)
    s.add_argument("--threshold", type=float, default=0.9)
    s.add_argument("--class", dest="cls")
    s.add_argument("--steps", type=int, default=None, help="SGLD steps per chain (default: training K)")
    s.add_argument("--max-attempts", type=int, default=None)
    s.add_argument("--from-prior", action="store_true", help="start chains from the prior, not the buffer")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="JSD / MMD / COV between two directories of clouds")
    e.add_argument("generated")
    e.add_argument("reference")
    e.add_argument("--emd", choices=("auto", "exact", "approx"), default="auto")
    e.add_argument("--force", action="store_true", help="allow exact EMD above the size guard")
    e.add_argument("--resolution", type=int, default=28)
    e.add_argument("--split", default="test", help="split to use when a manifest is given")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("classify", help="predict the class of one cloud")
    c.add_argument("model")
    c.add_argument("cloud")
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_classify)

    pl = sub.add_parser("plot", help="render clouds as SVG")
    pl.add_argument("files", nargs="*")
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.threads is not None:
            if args.threads < 1:
                raise UsageError("--threads must be >= 1")
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except (UsageError, ConfigError, CheckpointError, ParseError, ContractViolation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
