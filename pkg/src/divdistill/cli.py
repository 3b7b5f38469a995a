"""Command-line interface: gen-data, train-teachers, distill, evaluate, diversity, jacobian."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig
from .data import DataValidationError, gen_blobs, gen_ood_shift, gen_spirals, read_splits, write_splits
from .diffcore import ShapeError
from .diversity import (DiversityPlotData, diversity_plot_from_probs, gaussian_perturber, jacobian_cosine,
                        jacobian_matching_snr, ods_perturber, roc_auroc)
from .losses import ConfigError
from .models import (BatchEnsembleStudent, DeepEnsemble, MlpTeacher, as_members, load_checkpoint,
                     load_ensemble, member_probs, save_checkpoint, save_ensemble)
from .perturb import perturb_batch
from .pipeline import ensure_dir, evaluate_report, write_csv, write_json
from .train import distill, train_student_scratch, train_teachers

log = logging.getLogger("divdistill")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


def _run_config(args, overrides: dict) -> RunConfig:
    cfg = RunConfig.load(args.config, overrides)
    return cfg


def _echo(cfg: RunConfig, args, paths: dict) -> dict:
    resolved = {k: (str(Path(v).resolve()) if v is not None else None) for k, v in paths.items()}
    return {"config": cfg.to_dict(), "command": args.command, "paths": resolved, "version": __version__}


def _load_model(path):
    """A checkpoint file or a directory of teacher checkpoints."""
    path = Path(path)
    if path.is_dir():
        return load_ensemble(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    return load_checkpoint(path)


def _load_data(path):
    if path is None:
        raise ConfigError("no dataset directory given (use --data)")
    return read_splits(path)


def _split(splits, name: str):
    try:
        return splits[name]
    except KeyError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = _run_config(args, {"data.kind": args.kind, "data.k": args.k, "data.d": args.d, "data.n": args.n,
                             "data.noise": args.noise, "data.spread": args.spread, "seed": args.seed,
                             "data.ood_shift": args.ood_shift})
    seed = cfg.seed_for("data")
    if cfg["data.kind"] == "spirals":
        splits = gen_spirals(cfg["data.k"], cfg["data.n"], cfg["data.noise"], seed, turns=cfg["data.turns"],
                             r_min=cfg["data.r_min"], r_max=cfg["data.r_max"])
    elif cfg["data.kind"] == "blobs":
        splits = gen_blobs(cfg["data.k"], cfg["data.d"], cfg["data.n"], cfg["data.spread"], seed)
    else:
        raise ConfigError(f"data.kind must be 'spirals' or 'blobs', got {cfg['data.kind']!r}")
    if cfg["data.ood_shift"] > 0:
        splits.ood = gen_ood_shift(splits, cfg["data.ood_shift"], cfg.seed_for("ood"))
    splits.manifest["run"] = _echo(cfg, args, {"out": args.out})
    write_splits(splits, args.out)
    print(f"wrote {sum(splits.manifest['sizes'].values())} examples to {args.out}")
    return EXIT_OK


def cmd_train_teachers(args) -> int:
    cfg = _run_config(args, {"teacher.m": args.m, "seed": args.seed, "teacher.epochs": args.epochs,
                             "teacher.lr": args.lr, "model.hidden": args.hidden})
    splits = _load_data(args.data)
    M = cfg["teacher.m"]
    seeds = [cfg.seed_for("teacher", j) for j in range(M)]
    log.info("teacher seeds: %s", seeds)
    widths = cfg.widths(splits.dim, splits.num_classes)
    teachers, logs = train_teachers(splits, widths, M, cfg.train_config("teacher"), seeds)
    out = ensure_dir(args.out)
    echo = _echo(cfg, args, {"data": args.data, "out": args.out})
    save_ensemble(teachers, out, [{"run": echo, "data_dir": echo["paths"]["data"], "seed": s} for s in seeds])
    for j, tl in enumerate(logs):
        write_csv(out / f"log_{j}.csv", tl.rows, tl.COLUMNS)
    write_json(out / "run.json", {**echo, "seeds": seeds, "logs": [tl.summary() for tl in logs]})
    print(f"trained {M} teachers (seeds {seeds}) into {out}")
    return EXIT_OK


def cmd_distill(args) -> int:
    cfg = _run_config(args, {"perturb.strategy": args.perturb, "perturb.eta": args.eta, "loss.alpha": args.alpha,
                             "loss.tau": args.tau, "seed": args.seed, "student.epochs": args.epochs,
                             "student.lr": args.lr, "model.hidden": args.hidden})
    teachers = _load_model(args.teachers)
    if not isinstance(teachers, DeepEnsemble):
        raise ConfigError("--teachers must be a directory of teacher checkpoints")
    data_dir = args.data or teachers[0].meta.get("data_dir")
    splits = _load_data(data_dir)
    widths = cfg.widths(splits.dim, splits.num_classes)
    init = BatchEnsembleStudent(widths, len(teachers), seed=cfg.seed_for("student_init"),
                                factor_init=cfg["model.factor_init"])
    scfg = cfg.train_config("student")
    if args.scratch:
        student, trace = train_student_scratch(init, splits, scfg, np.random.default_rng(cfg.seed_for("scratch")))
    else:
        student, trace = distill(teachers, init, splits, cfg.loss_config(), cfg.perturb_config(), scfg,
                                 np.random.default_rng(cfg.seed_for("distill")))
    echo = _echo(cfg, args, {"teachers": args.teachers, "data": data_dir, "out": args.out})
    save_checkpoint(student, args.out, {"run": echo, "data_dir": echo["paths"]["data"], **trace.summary()})
    out = Path(args.out)
    write_csv(out.with_name(out.stem + ".log.csv"), trace.rows, trace.COLUMNS)
    print(f"saved student to {out} (best epoch {trace.best_epoch}, "
          f"{trace.degenerate_count} unperturbed examples)")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _run_config(args, {"seed": args.seed, "eval.ece_bins": args.bins})
    model = _load_model(args.model)
    splits = _load_data(args.data)
    dee_teachers = _load_model(args.dee_teachers) if args.dee_teachers else None
    if dee_teachers is not None and not isinstance(dee_teachers, DeepEnsemble):
        raise ConfigError("--dee-teachers must be a directory of teacher checkpoints")
    echo = _echo(cfg, args, {"model": args.model, "data": args.data, "dee_teachers": args.dee_teachers,
                             "out": args.out})
    report = evaluate_report(model, splits, cfg["eval.ece_bins"], dee_teachers,
                             np.random.default_rng(cfg.seed_for("dee")), cfg["eval.dee_subsets"], echo)
    write_json(args.out, report)
    print(f"calibrated test: acc {report['acc']:.4f} nll {report['nll']:.4f} ece {report['ece']:.4f} "
          f"(tau* {report['tau_star']:.4f}, dee {report['dee']})")
    return EXIT_OK


def _teacher_list(model) -> list[MlpTeacher]:
    members = as_members(model)
    if not all(isinstance(m, MlpTeacher) for m in members):
        raise ConfigError("perturbations are computed from teacher networks; pass --perturb-teachers")
    return members


def cmd_diversity(args) -> int:
    cfg = _run_config(args, {"seed": args.seed, "perturb.strategy": args.perturb, "perturb.eta": args.eta,
                             "perturb.tau": args.tau, "diversity.bins": args.bins})
    model = _load_model(args.models)
    ds = _split(_load_data(args.data), args.split)
    x = ds.x
    pcfg = cfg.perturb_config()
    degenerate = 0
    if pcfg.strategy != "none":
        source = _load_model(args.perturb_teachers) if args.perturb_teachers else model
        pert = perturb_batch(ds.x, ds.y, _teacher_list(source), pcfg, np.random.default_rng(cfg.seed_for("perturb")))
        x, degenerate = pert.x, pert.degenerate
    plot: DiversityPlotData = diversity_plot_from_probs(member_probs(model, x), cfg["diversity.bins"])
    prefix = Path(args.out)
    echo = _echo(cfg, args, {"models": args.models, "data": args.data, "out": args.out})
    write_csv(prefix.with_suffix(".csv"), plot.to_rows())
    write_json(prefix.with_suffix(".json"), {"mean_kld": plot.mean_kld, "split": args.split, "n": len(x),
                                             "degenerate": degenerate, "run": echo, "version": __version__})
    print(f"mean_kld {plot.mean_kld:.6g} over {len(x)} {args.split} examples")
    return EXIT_OK


def _pairs(teacher, student) -> list[tuple]:
    """(teacher, student member) pairs: one-to-one for ensembles, member_index for a single teacher."""
    if isinstance(teacher, DeepEnsemble):
        if not isinstance(student, BatchEnsembleStudent) or student.M != len(teacher):
            raise ConfigError("an ensemble teacher needs a BatchEnsemble student of the same size")
        return [(teacher[j], student.member(j)) for j in range(len(teacher))]
    j = int(teacher.meta.get("member_index", 0))
    target = student.member(j) if isinstance(student, BatchEnsembleStudent) else student
    return [(teacher, target)]


def cmd_jacobian(args) -> int:
    cfg = _run_config(args, {"seed": args.seed, "jacobian.samples": args.samples, "loss.tau": args.tau})
    teacher = _load_model(args.teacher)
    students = [_load_model(p) for p in args.students]
    ds = _split(_load_data(args.data), args.split)
    prefix = Path(args.out)
    echo = _echo(cfg, args, {"teacher": args.teacher, "data": args.data, "out": args.out,
                             **{f"student_{i}": p for i, p in enumerate(args.students)}})
    summary = {"run": echo, "version": __version__, "split": args.split}

    if args.snr:
        t, s = _pairs(teacher, students[0])[0]
        x = ds.x[:cfg["jacobian.snr_points"]]
        rows = []
        for eta in cfg["jacobian.snr_etas"]:
            kw = dict(n_samples=cfg["jacobian.samples"], tau=cfg["loss.tau"])
            rows.append({"eta": eta,
                         "snr_ods": jacobian_matching_snr(t, s, x, ods_perturber(t, eta, cfg["loss.tau"]),
                                                          rng=np.random.default_rng(cfg.seed_for("jacobian")), **kw),
                         "snr_gaussian": jacobian_matching_snr(t, s, x, gaussian_perturber(eta),
                                                               rng=np.random.default_rng(cfg.seed_for("jacobian")), **kw)})
        write_csv(prefix.with_suffix(".csv"), rows)
        summary["snr"] = rows
        summary["snr_meta"] = {"samples": cfg["jacobian.samples"], "etas": cfg["jacobian.snr_etas"],
                               "points": len(x)}
    else:
        if len(students) < 2:
            raise ConfigError("jacobian needs at least two students; the last one is the baseline")
        cos = [np.concatenate([np.atleast_1d(jacobian_cosine(t, s, ds.x)) for t, s in _pairs(teacher, st)])
               for st in students]
        baseline = cos[-1]
        summary["mean_cos"] = {p: float(c.mean()) for p, c in zip(args.students, cos)}
        summary["auroc"] = {}
        for i, (path, c) in enumerate(zip(args.students[:-1], cos[:-1])):
            roc = roc_auroc(c, baseline)
            write_csv(prefix.with_name(f"{prefix.name}_roc_{i}.csv"), roc.to_rows())
            summary["auroc"][path] = roc.auroc
    write_json(prefix.with_suffix(".json"), summary)
    print(f"wrote {prefix.with_suffix('.json')}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="divdistill", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int)
        return sp

    g = common(sub.add_parser("gen-data", help="generate a synthetic dataset"))
    g.add_argument("--kind", choices=["spirals", "blobs"])
    g.add_argument("--k", type=int)
    g.add_argument("--d", type=int)
    g.add_argument("--n", type=int, help="examples per class")
    g.add_argument("--noise", type=float)
    g.add_argument("--spread", type=float)
    g.add_argument("--ood-shift", type=float)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = common(sub.add_parser("train-teachers", help="train a deep ensemble of MLP teachers"))
    t.add_argument("--data", required=True)
    t.add_argument("--m", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--hidden", help="comma-separated hidden widths")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train_teachers)

    d = common(sub.add_parser("distill", help="distill teachers into a BatchEnsemble student"))
    d.add_argument("--teachers", required=True)
    d.add_argument("--data")
    d.add_argument("--perturb", choices=["none", "gaussian", "ods", "confods", "adversarial"])
    d.add_argument("--eta", type=float)
    d.add_argument("--alpha", type=float)
    d.add_argument("--tau", type=float)
    d.add_argument("--epochs", type=int)
    d.add_argument("--lr", type=float)
    d.add_argument("--hidden")
    d.add_argument("--scratch", action="store_true", help="train on labels only, ignoring the teachers")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_distill)

    e = common(sub.add_parser("evaluate", help="standard and calibrated metrics report"))
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--dee-teachers")
    e.add_argument("--bins", type=int)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    v = common(sub.add_parser("diversity", help="diversity plot data and mean-KLD"))
    v.add_argument("--models", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--split", default="train")
    v.add_argument("--perturb", choices=["none", "gaussian", "ods", "confods", "adversarial"], default="none")
    v.add_argument("--perturb-teachers", help="teachers used to compute perturbations (default: --models)")
    v.add_argument("--eta", type=float)
    v.add_argument("--tau", type=float)
    v.add_argument("--bins", type=int)
    v.add_argument("--out", required=True, help="output prefix for .csv and .json")
    v.set_defaults(func=cmd_diversity)

    j = common(sub.add_parser("jacobian", help="Jacobian cosine ROC or gradient SNR"))
    j.add_argument("--teacher", required=True)
    j.add_argument("--students", nargs="+", required=True)
    j.add_argument("--data", required=True)
    j.add_argument("--split", default="val")
    j.add_argument("--snr", action="store_true")
    j.add_argument("--samples", type=int)
    j.add_argument("--tau", type=float)
    j.add_argument("--out", required=True, help="output prefix")
    j.set_defaults(func=cmd_jacobian)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ArithmeticError as exc:  # includes DegenerateGradient and FloatingPointError
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DataValidationError, ShapeError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
