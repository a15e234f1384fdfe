"""Command-line entry point: ``affordance <command> [flags]``.

Commands: synth, train, generate, evaluate, analyze-latent, transfer.
Every command is a pure function of its inputs and seeds. Exit status is 0
only when all outputs were written; anything written by a failing command
is removed again.
"""
import argparse
import csv
import hashlib
import json
import shutil
import sys
from collections import Counter
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import baseline, evaluation, model, synthgen
from .dataspec import (GenerationRequest, read_dataset, read_model, uniform_times,
                       write_dataset, write_model)


class CLIError(Exception):
    pass


# --------------------------------------------------------------------------
# run configuration

@dataclass
class RunConfig:
    """JSON run configuration; unknown keys are rejected at every level."""
    version: int = 1
    seed: int = 0
    hyper: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    evaluation: dict = field(default_factory=dict)

    TRAIN_KEYS = ("iterations", "snapshot_every", "lr", "beta1", "beta2", "eps", "split")
    EVAL_KEYS = ("configs", "split", "truth")

    @classmethod
    def from_json(cls, d):
        allowed = {f.name for f in fields(cls)}
        extra = set(d) - allowed
        if extra:
            raise CLIError(f"unknown run-config keys {sorted(extra)}; allowed: {sorted(allowed)}")
        if d.get("version", 1) != 1:
            raise CLIError(f"unsupported run-config version {d.get('version')}")
        if not isinstance(d.get("seed", 0), int):
            raise CLIError("run-config seed must be an integer")
        for section, keys in (("train", cls.TRAIN_KEYS), ("evaluation", cls.EVAL_KEYS)):
            extra = set(d.get(section, {})) - set(keys)
            if extra:
                raise CLIError(f"unknown {section} keys {sorted(extra)}; allowed: {list(keys)}")
        known_hyper = set(model.DEFAULT_HYPER) | set(baseline.DEFAULT_HYPER)
        extra = set(d.get("hyper", {})) - known_hyper
        if extra:
            raise CLIError(f"unknown hyperparameters {sorted(extra)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        if path is None:
            return cls()
        try:
            with open(path) as fh:
                return cls.from_json(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise CLIError(f"cannot read run config {path}: {exc}") from None


# --------------------------------------------------------------------------
# output bookkeeping

@contextmanager
def _outputs():
    """Collects created paths; removes them all if the body raises."""
    created = []

    def claim(path):
        path = Path(path)
        if not path.exists():
            created.append(path)
        return path

    try:
        yield claim
    except BaseException:
        for p in reversed(created):
            if p.is_dir():
                shutil.rmtree(p, ignore_errors=True)
            elif p.exists():
                p.unlink()
        raise


def _digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_any_model(path):
    params = read_model(path)
    shapes = baseline.expected_shapes if params.kind == "baseline" else model.expected_shapes
    return read_model(path, shapes)


def _predictor(params):
    return baseline.baseline_rollout if params.kind == "baseline" else model.generate


# --------------------------------------------------------------------------
# commands

def cmd_synth(args):
    try:
        cfg = synthgen.ScenarioConfig(args.task, noise=args.noise, seed=args.seed,
                                      samples_per_object=args.samples_per_object,
                                      cone_rolls=not args.cone_static)
    except ValueError as exc:
        raise CLIError(str(exc)) from None
    ds = synthgen.generate(cfg)
    with _outputs() as claim:
        write_dataset(ds, claim(args.out))
    counts = Counter((s.meta.get("split"), s.meta.get("outcome")) for s in ds.samples)
    objects = Counter(s.meta.get("split") for s in
                      {s.meta["object_id"]: s for s in ds.samples}.values())
    print(f"wrote {args.out}: {len(ds)} samples, sha256 {_digest(args.out)}")
    for split, n in sorted(objects.items()):
        print(f"  {split}: {n} objects")
    for (split, outcome), n in sorted(counts.items()):
        print(f"  {split} / {outcome}: {n} samples")
    return 0


def _train_split(ds, split):
    if split == "all":
        return ds
    sub = ds.split(split)
    if not sub.samples:
        raise CLIError(f"dataset has no samples in split {split!r}")
    return sub


def cmd_train(args):
    run = RunConfig.load(args.config)
    ds = read_dataset(args.data)
    tcfg = dict(run.train)
    split = tcfg.pop("split", "train")
    if args.iterations is not None:
        tcfg["iterations"] = args.iterations
    if args.snapshot_every is not None:
        tcfg["snapshot_every"] = args.snapshot_every
    seed = run.seed if args.seed is None else args.seed
    train = _train_split(ds, split)
    out = Path(args.out_dir)
    with _outputs() as claim:
        claim(out)
        out.mkdir(parents=True, exist_ok=True)
        losses_path = claim(out / "loss.csv")
        if args.baseline:
            if args.baseline not in baseline.VARIANTS:
                raise CLIError(f"unknown baseline variant {args.baseline!r}; "
                               f"valid: {', '.join(baseline.VARIANTS)}")
            bcfg = {k: v for k, v in tcfg.items() if k != "snapshot_every"}
            hyper = {k: v for k, v in run.hyper.items() if k in baseline.DEFAULT_HYPER}
            params, losses = baseline.baseline_train(
                train, args.baseline, baseline.BaselineConfig(seed=seed, **bcfg), hyper)
            final = claim(out / "baseline.affb")
            write_model(params, final, baseline.expected_shapes(params.hyper, params.channels))
        else:
            hyper = {k: v for k, v in run.hyper.items() if k in model.DEFAULT_HYPER}
            params = model.init_params(train.channels, hyper, seed=seed, dataset=train)
            final_params, snaps, losses = model.train(
                params, train, model.TrainConfig(seed=seed, **tcfg))
            snapdir = claim(out / "snapshots")
            snapdir.mkdir(exist_ok=True)
            for step, p in snaps:
                write_model(p, snapdir / f"snapshot_{step:07d}.affm")
            final = claim(out / "model.affm")
            write_model(final_params, final,
                        model.expected_shapes(final_params.hyper, final_params.channels))
        with open(losses_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss"])
            for i, v in enumerate(losses, 1):
                w.writerow([i, repr(float(v))])
        with open(claim(out / "run.json"), "w") as fh:
            json.dump({"data": str(args.data), "baseline": args.baseline, "seed": seed,
                       "split": split, "train": tcfg, "hyper": run.hyper}, fh, indent=2,
                      sort_keys=True)
    print(f"wrote {final}: sha256 {_digest(final)}")
    return 0


def cmd_generate(args):
    params = _load_any_model(args.model)
    try:
        with open(args.request) as fh:
            req = GenerationRequest.from_json(json.load(fh))
        req.validate(params.channels)
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        raise CLIError(f"bad request {args.request}: {exc}") from None
    preds = _predictor(params)(params, req)
    with _outputs() as claim:
        with open(claim(args.out), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["channel", "row", "col", "t", "mu", "sigma"])
            for name in req.outputs:
                c = params.channel(name)
                p = preds[name]
                if c.kind == "image":
                    for (r, col), mu in np.ndenumerate(p.mean):
                        w.writerow([name, r, col, "", repr(float(mu)), repr(float(p.std))])
                    continue
                times = req.times if req.times is not None else uniform_times(c.length)
                for (r, col), mu in np.ndenumerate(p.mean):
                    w.writerow([name, r, col, repr(float(times[r])), repr(float(mu)),
                                repr(float(p.std[r, col]))])
    print(f"wrote {args.out}")
    return 0


def _parse_configs(text, channels):
    if text is None or text == "all":
        return "all"
    if text.lstrip().startswith("["):
        return evaluation.configurations(channels, json.loads(text))
    return evaluation.configurations(channels, [c.split("+") for c in text.split(",")])


def cmd_evaluate(args):
    params = _load_any_model(args.model)
    ds = read_dataset(args.data)
    split_ds = ds if args.split == "all" else ds.split(args.split)
    if not split_ds.samples:
        raise CLIError(f"dataset has no samples in split {args.split!r}")
    truth = None
    if args.truth == "clean":
        clean = synthgen.generate(synthgen.config_from_meta(ds.meta, noise=0.0))
        truth = clean if args.split == "all" else clean.split(args.split)
    try:
        configs = _parse_configs(args.configs, split_ds.channels)
        report = evaluation.rms_table(params, split_ds, configs, truth=truth,
                                      predictor=_predictor(params))
    except (KeyError, ValueError) as exc:
        raise CLIError(str(exc)) from None
    out = Path(args.report_dir)
    with _outputs() as claim:
        claim(out)
        out.mkdir(parents=True, exist_ok=True)
        report.write_csv(claim(out / "report.csv"))
        with open(claim(out / "summary.json"), "w") as fh:
            json.dump({"model": str(args.model), "data": str(args.data), "split": args.split,
                       "truth": args.truth, "table": report.summary()}, fh, indent=2,
                      sort_keys=True)
    print(f"wrote {out / 'report.csv'} ({len(report.rows)} rows)")
    return 0


def _snapshot_files(paths):
    files = []
    for p in paths:
        p = Path(p)
        files.extend(sorted(p.glob("*.affm")) if p.is_dir() else [p])
    if len(files) < 2:
        raise CLIError("analyze-latent needs at least two snapshot files")
    return files


def cmd_analyze_latent(args):
    files = _snapshot_files(args.snapshots)
    snaps = []
    for f in files:
        stem = f.stem.rsplit("_", 1)[-1]
        step = int(stem) if stem.isdigit() else len(snaps)
        snaps.append((step, read_model(f, model.expected_shapes)))
    ds = read_dataset(args.data)
    trace = evaluation.latent_trace(snaps, ds, n_points=args.points, seed=args.seed)
    final, first = trace.points[-1], trace.points[0]
    summary = {"snapshots": len(snaps), "objects": len(trace.object_ids),
               "degenerate": trace.degenerate}
    if len(set(trace.labels)) >= 2:
        summary["final_silhouette"] = evaluation.silhouette(final, trace.labels)
        d0 = evaluation.intra_class_distance(first, trace.labels)
        d1 = evaluation.intra_class_distance(final, trace.labels)
        summary.update(first_intra=d0, final_intra=d1,
                       intra_ratio=d1 / d0 if d0 > 0 else None)
    with _outputs() as claim:
        trace.write_csv(claim(args.out))
        if args.summary:
            with open(claim(args.summary), "w") as fh:
                json.dump(summary, fh, indent=2, sort_keys=True)
    print(f"wrote {args.out}: {len(snaps) * len(trace.object_ids)} rows; "
          + ", ".join(f"{k}={v}" for k, v in summary.items()))
    return 0


def cmd_transfer(args):
    try:
        proto = evaluation.load_protocols(args.protocol)
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        raise CLIError(f"bad protocol file {args.protocol}: {exc}") from None
    results = evaluation.transfer_matrix(proto, retention=not args.no_retention)
    with _outputs() as claim:
        evaluation.write_transfer_report(results, claim(args.report))
        if args.json:
            with open(claim(args.json), "w") as fh:
                json.dump([{**asdict(r), "matches": r.matches} for r in results], fh,
                          indent=2, sort_keys=True, default=str)
    mark = {True: "yes", False: "no"}
    for r in results:
        print(f"{r.name}: transfer={mark[r.transfer]} direction={mark[r.direction]} "
              f"matches_expected={mark[r.matches]}")
    return 0


# --------------------------------------------------------------------------
# argument parsing

def build_parser():
    ap = argparse.ArgumentParser(prog="affordance", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scenario dataset")
    p.add_argument("--task", required=True,
                   help=f"scenario to generate: {', '.join(synthgen.SCENARIOS)}")
    p.add_argument("--out", required=True, help="output dataset path (.affd)")
    p.add_argument("--seed", type=int, default=0, help="noise seed (default 0)")
    p.add_argument("--noise", type=float, default=0.01,
                   help="std of Gaussian noise added to trajectories (default 0.01)")
    p.add_argument("--samples-per-object", type=int, default=20,
                   help="noise realizations per object/action pair (default 20)")
    p.add_argument("--cone-static", action="store_true",
                   help="rollability only: treat the cone as non-rolling")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the affordance model or a baseline")
    p.add_argument("--data", required=True, help="training dataset (.affd)")
    p.add_argument("--config", help="run-config JSON (seed, hyper, train, evaluation)")
    p.add_argument("--out-dir", required=True,
                   help="directory for the model, snapshots/, loss.csv and run.json")
    p.add_argument("--snapshot-every", type=int,
                   help="snapshot interval in steps; overrides the run config")
    p.add_argument("--iterations", type=int, help="training steps; overrides the run config")
    p.add_argument("--seed", type=int, help="training seed; overrides the run config")
    p.add_argument("--baseline", metavar="VARIANT",
                   help=f"train a baseline instead: {', '.join(baseline.VARIANTS)}")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="decode channels from a conditioning request")
    p.add_argument("--model", required=True, help="model (.affm) or baseline (.affb) file")
    p.add_argument("--request", required=True, help="generation request JSON")
    p.add_argument("--out", required=True,
                   help="CSV of predictions: channel,row,col,t,mu,sigma")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="masked-input RMS table on a dataset split")
    p.add_argument("--model", required=True, help="model (.affm) or baseline (.affb) file")
    p.add_argument("--data", required=True, help="dataset (.affd)")
    p.add_argument("--configs", default="all",
                   help="'all', comma-separated configs like 'object+effect,ur10', "
                        "or a JSON list of channel lists")
    p.add_argument("--report-dir", required=True,
                   help="directory for report.csv and summary.json")
    p.add_argument("--split", default="test",
                   help="sample split to evaluate: train, test, novel or all (default test)")
    p.add_argument("--truth", choices=("clean", "data"), default="clean",
                   help="ground truth: regenerate noise-free (clean) or use the file (data)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze-latent", help="PCA trace of affordance latents over snapshots")
    p.add_argument("--snapshots", required=True, nargs="+",
                   help="snapshot files or directories of .affm files, in training order")
    p.add_argument("--data", required=True, help="dataset whose objects are traced")
    p.add_argument("--out", required=True,
                   help="CSV: snapshot,step,object_id,label,pc1,pc2")
    p.add_argument("--summary", help="optional JSON with silhouette and intra-class distances")
    p.add_argument("--points", type=int, default=10,
                   help="condition points per trajectory channel (default 10)")
    p.add_argument("--seed", type=int, default=0, help="seed for condition point choice")
    p.set_defaults(func=cmd_analyze_latent)

    p = sub.add_parser("transfer", help="run the transfer/generalization protocols")
    p.add_argument("--protocol", required=True, help="protocol JSON")
    p.add_argument("--report", required=True, help="CSV verdict table")
    p.add_argument("--json", help="optional JSON with per-test details")
    p.add_argument("--no-retention", action="store_true",
                   help="skip the old-object RMS retention measurement")
    p.set_defaults(func=cmd_transfer)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CLIError, OSError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"affordance {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
