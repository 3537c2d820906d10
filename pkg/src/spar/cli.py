"""Command-line entry points.

Exit codes: 0 success, 1 usage/configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import shutil
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import nets
from .data import AugmentParams, CohortSpec, cohort_hash, generate_cohort, load_cohort, save_cohort
from .nets import NetConfig
from .objectives import MethodKind
from .train import TrainConfig

log = logging.getLogger("spar")


class UsageError(Exception):
    pass


@dataclass
class EvalOptions:
    closing_radius: int = 1


@dataclass
class VizOptions:
    epochs: tuple[int, ...] = (1, 2, 3, 4, 5, 10)
    perplexity: float = 30.0
    iterations: int = 1000


@dataclass
class RunConfig:
    cohort: CohortSpec = field(default_factory=CohortSpec)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalOptions = field(default_factory=EvalOptions)
    latentviz: VizOptions = field(default_factory=VizOptions)
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        sections = {"cohort": CohortSpec, "net": NetConfig, "train": TrainConfig, "eval": EvalOptions,
                    "latentviz": VizOptions}
        unknown = set(d) - set(sections) - {"seed"}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for name, typ in sections.items():
            sub = d.get(name, {})
            if not isinstance(sub, dict):
                raise UsageError(f"config section {name!r} must be an object")
            allowed = {f.name for f in dataclasses.fields(typ)}
            bad = set(sub) - allowed
            if bad:
                raise UsageError(f"unknown keys in {name!r}: {sorted(bad)}")
            if name == "train" and isinstance(sub.get("augment"), dict):
                sub = dict(sub, augment=AugmentParams(**sub["augment"]))
            try:
                kwargs[name] = typ(**sub)
            except (TypeError, ValueError) as exc:
                raise UsageError(f"invalid {name!r} section: {exc}") from exc
        cfg = cls(**kwargs, seed=int(d.get("seed", 0)))
        if "seed" in d:
            cfg.cohort.seed = cfg.seed
            cfg.train.seed = cfg.seed
        return cfg

    @classmethod
    def load(cls, path) -> RunConfig:
        if path is None:
            return cls()
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _prepare_out(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f"output directory {out} exists; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _override(obj, **values):
    for k, v in values.items():
        if v is not None:
            setattr(obj, k, v)


def _train_config(cfg: RunConfig, args) -> TrainConfig:
    tc = cfg.train
    _override(tc, seed=getattr(args, "seed", None), epochs=getattr(args, "epochs", None),
              lam=getattr(args, "lam", None), seg_lr=getattr(args, "seg_lr", None),
              ae_lr=getattr(args, "ae_lr", None), batch_size=getattr(args, "batch_size", None))
    if getattr(args, "method", None):
        tc.method = MethodKind(args.method)
    try:
        tc.__post_init__()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return tc


def _net_config(cfg: RunConfig, cases) -> NetConfig:
    net = cfg.net
    net.input_size = cases[0].image.width
    net.classes = max(c.mask.classes or int(c.mask.data.max()) + 1 for c in cases)
    try:
        net.__post_init__()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return net


def _load_cases(path):
    try:
        return load_cohort(path)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = RunConfig.load(args.config)
    spec = cfg.cohort
    _override(spec, n_patients=args.patients, slice_size=args.size, depth=args.depth, seed=args.seed,
              n_structures=args.structures, noise_sigma=args.noise, bias_field_strength=args.bias)
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = _prepare_out(args.out, args.force)
    cases = generate_cohort(spec)
    save_cohort(cases, out)
    digest = cohort_hash(cases)
    (out / "cohort.json").write_text(json.dumps({"spec": dataclasses.asdict(spec), "cohort_hash": digest},
                                                indent=2, sort_keys=True) + "\n")
    print(digest)
    return 0


def cmd_train(args) -> int:
    from .train import run_training

    cfg = RunConfig.load(args.config)
    cases = _load_cases(args.data)
    tc = _train_config(cfg, args)
    net = _net_config(cfg, cases)
    out = _prepare_out(args.out, args.force)
    run = run_training(cases, net, tc, out)
    manifest = run.manifest
    manifest["data_dir"] = str(Path(args.data).resolve())
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(out / "run_manifest.json")
    return 0


def _run_manifest(run_dir) -> dict:
    path = Path(run_dir) / "run_manifest.json"
    if not path.exists():
        raise UsageError(f"{run_dir}: no run_manifest.json")
    return json.loads(path.read_text())


def cmd_eval(args) -> int:
    from .evaluation import Aggregate, evaluate_case, format_table, leave_one_out, write_aggregate_csv, \
        write_case_csv
    from .train import predict_volume

    radius = RunConfig.load(args.config).eval.closing_radius
    manifest = _run_manifest(args.run)
    cases = _load_cases(args.data)
    out = _prepare_out(args.out or Path(args.run) / "eval", args.force)
    tc = TrainConfig(**{k: v for k, v in manifest["train_config"].items()})
    net = NetConfig(**manifest["net_config"])
    if args.loo:
        result = leave_one_out(cases, net, tc, out_dir=out / "folds", ae_cache={}, radius_voxels=radius)
        reports, agg = result.reports, result.aggregate
        with open(out / "folds.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "case_id", "seed", "train_cohort_hash"])
            for r, s, h in zip(reports, result.fold_seeds, result.fold_hashes):
                w.writerow([tc.method.value, r.case_id, s, h])
    else:
        by_id = {c.case_id: c for c in cases}
        if args.case not in by_id:
            raise UsageError(f"case {args.case!r} not found in {args.data}")
        final = str(manifest["final_epoch"])
        ckpt = manifest["checkpoints"]["S"].get(final)
        if ckpt is None or not (Path(args.run) / ckpt).exists():
            raise UsageError(f"{args.run}: missing segmenter checkpoint for epoch {final}")
        segmenter = nets.load_params(Path(args.run) / ckpt, expect_role="S")
        case = by_id[args.case]
        reports = [evaluate_case(predict_volume(segmenter, case.image), case.mask, case.case_id, radius)]
        agg = Aggregate.from_reports(tc.method.value, reports)
    write_case_csv(out / "per_case.csv", reports)
    write_aggregate_csv(out / "aggregate.csv", [agg])
    table = format_table([agg])
    (out / "table.txt").write_text(table)
    print(table, end="")
    return 0


def cmd_compare(args) -> int:
    from .evaluation import format_table, leave_one_out, write_aggregate_csv, write_case_csv

    cfg = RunConfig.load(args.config)
    cases = _load_cases(args.data)
    net = _net_config(cfg, cases)
    out = _prepare_out(args.out, args.force)
    methods = [MethodKind(m) for m in (args.methods.split(",") if args.methods else [m.value for m in MethodKind])]
    ae_cache: dict = {}
    aggregates, fold_rows = [], []
    for method in methods:
        tc = dataclasses.replace(_train_config(cfg, args), method=method)
        result = leave_one_out(cases, net, tc, out_dir=out / method.value, ae_cache=ae_cache,
                               radius_voxels=cfg.eval.closing_radius)
        aggregates.append(result.aggregate)
        fold_rows += [[method.value, r.case_id, s, h]
                      for r, s, h in zip(result.reports, result.fold_seeds, result.fold_hashes)]
        write_case_csv(out / method.value / "per_case.csv", result.reports)
    write_aggregate_csv(out / "compare.csv", aggregates)
    with open(out / "folds.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "case_id", "seed", "train_cohort_hash"])
        w.writerows(fold_rows)
    (out / "compare.json").write_text(json.dumps({"cohort_hash": cohort_hash(cases),
                                                  "methods": [m.value for m in methods]},
                                                 indent=2, sort_keys=True) + "\n")
    table = format_table(aggregates)
    (out / "table.txt").write_text(table)
    print(table, end="")
    return 0


def cmd_viz_latent(args) -> int:
    from .latentviz import visualize_run

    cfg = RunConfig.load(args.config)
    manifest = _run_manifest(args.run)
    data = args.data or manifest.get("data_dir")
    if data is None:
        raise UsageError("no --data given and the run manifest records no data directory")
    epochs = tuple(int(e) for e in args.epochs.split(",")) if args.epochs else cfg.latentviz.epochs
    out = _prepare_out(args.out, args.force)
    try:
        summary = visualize_run(args.run, _load_cases(data), out, epochs=epochs,
                                perplexity=args.perplexity or cfg.latentviz.perplexity,
                                iterations=args.iterations or cfg.latentviz.iterations,
                                seed=cfg.seed if args.seed is None else args.seed)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    for e, stats in summary["convergence"].items():
        print(e, " ".join(f"{k}:{v:.4f}" for k, v in sorted(stats.items())))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spar", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic cohort")
    g.add_argument("--out", required=True)
    g.add_argument("--patients", type=int)
    g.add_argument("--size", type=int)
    g.add_argument("--depth", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--structures", type=int)
    g.add_argument("--noise", type=float)
    g.add_argument("--bias", type=float)
    g.set_defaults(func=cmd_gen_data)

    def training_flags(sp):
        sp.add_argument("--seed", type=int)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--lam", type=float)
        sp.add_argument("--seg-lr", type=float)
        sp.add_argument("--ae-lr", type=float)
        sp.add_argument("--batch-size", type=int)

    t = sub.add_parser("train", help="pretrain (if needed) and train one method")
    t.add_argument("--data", required=True)
    t.add_argument("--method", choices=[m.value for m in MethodKind], required=True)
    t.add_argument("--out", required=True)
    training_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a run on one case or by leave-one-out")
    e.add_argument("--run", required=True)
    e.add_argument("--data", required=True)
    which = e.add_mutually_exclusive_group(required=True)
    which.add_argument("--case")
    which.add_argument("--loo", action="store_true")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="leave-one-out comparison of all methods")
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--methods", help="comma-separated subset of methods")
    training_flags(c)
    c.set_defaults(func=cmd_compare)

    v = sub.add_parser("viz-latent", help="latent-code extraction, t-SNE and convergence")
    v.add_argument("--run", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--data")
    v.add_argument("--epochs")
    v.add_argument("--perplexity", type=float)
    v.add_argument("--iterations", type=int)
    v.add_argument("--seed", type=int)
    v.set_defaults(func=cmd_viz_latent)

    for sp in (g, t, e, c, v):
        sp.add_argument("--config")
        sp.add_argument("--force", action="store_true", help="overwrite an existing --out directory")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"spar: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - single-line diagnostic, runtime failure
        print(f"spar: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
