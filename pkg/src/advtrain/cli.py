"""
Command-line entry point.

Subcommands: train, eval, attack, gradcheck, experiment, lr-find, report.
Exit codes: 0 success, 1 usage or input error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import tensor as T
from .attacks import AttackConfig, generate
from .config import KEYS, ConfigError, RunConfig, dump_config, load_config, parse_text
from .data import DataFormatError, load_dataset, make_cv_plan, split_holdout, subsample
from .evaluation import EvalReport, evaluate_robustness, format_table, write_curve_csv, write_report_csv
from .gradcheck import run_gradcheck
from .models import CheckpointError, build_model, load_checkpoint, save_checkpoint
from .rng import derive_seed
from .stats import corrected_resampled_ttest
from .training import TrainingDiverged, adversarial_train, lr_range_test

log = logging.getLogger("advtrain")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2

PRESETS = {
    "desk": {
        "dataset": "mnist",
        "arch": "small_cnn",
        "train_subset": 10000,
        "test_subset": 1000,
        "epochs": 8,
        "lr_lo": 1e-4,
        "lr_hi": 3e-3,
        "val_size": 500,
        "eot_L": 10,
        "spsa_subset": 100,
        "spsa_samples": 256,
        "spsa_steps": 20,
    },
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_config_flags(p):
    p.add_argument("--config", help="key = value run configuration file")
    p.add_argument("--manifest", help="replay the configuration recorded in a manifest")
    p.add_argument("--preset", choices=sorted(PRESETS), help="start from a named preset")
    p.add_argument("--workers", type=int, default=1, help="worker processes for attack generation")
    for key in KEYS:
        p.add_argument("--" + key.replace("_", "-"), dest=key, default=None, metavar="VALUE")


def build_parser():
    ap = _Parser(prog="advtrain", description="Adversarial training with learned noise injection.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("train", help="adversarially train a model")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint under attack")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("attack", help="dump adversarial examples for a checkpoint")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--kind", default="pgd", choices=["fgsm", "r_plus_fgsm", "rfgsm", "pgd", "spsa"])
    p.add_argument("--count", type=int, default=100)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--networks", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("experiment", help="repeated two-fold protocol, with and without noise layer")
    _add_config_flags(p)

    p = sub.add_parser("lr-find", help="learning-rate range test")
    _add_config_flags(p)

    p = sub.add_parser("report", help="render a table from saved results")
    p.add_argument("results", nargs="+", help="eval or experiment output directories")
    p.add_argument("--out", default=None)
    return ap


# ---------------------------------------------------------------------------
# helpers


def resolve_config(args) -> RunConfig:
    """Manifest snapshot, then preset, then config file, then explicit flags."""
    values = {}
    if getattr(args, "manifest", None):
        with open(args.manifest) as fh:
            values.update(json.load(fh)["config"])
    if getattr(args, "preset", None):
        values.update(PRESETS[args.preset])
    if getattr(args, "config", None):
        with open(args.config) as fh:
            values.update(parse_text(fh.read(), args.config))
    values.update({k: getattr(args, k) for k in KEYS if getattr(args, k, None) is not None})
    return load_config(None, values)


def _load_split(cfg: RunConfig, split: str):
    ds = load_dataset(cfg.dataset, split, cfg.data_root)
    return subsample(ds, cfg.train_subset if split == "train" else cfg.test_subset)


def _model_for(cfg: RunConfig, ds):
    return build_model(cfg.arch, in_shape=ds.images.shape[1:], num_classes=ds.num_classes, pnil=cfg.pnil,
                       seed=derive_seed(cfg.seed, "init"))


def _write_manifest(out_dir, command, cfg: RunConfig, config_path, artifacts, workers, extra=None):
    path = os.path.join(out_dir, "manifest.json")
    man = {
        "command": command,
        "config_path": config_path,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "artifacts": sorted(artifacts),
        "runtime_options": {"workers": workers},
    }
    if extra:
        man.update(extra)
    with open(path, "w") as fh:
        json.dump(man, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _train_one(cfg: RunConfig, data, out_dir):
    """Train on ``data`` minus its last ``val_size`` samples, which validate each epoch."""
    os.makedirs(out_dir, exist_ok=True)
    train_ds, val = split_holdout(data, cfg.val_size)
    model = _model_for(cfg, train_ds)
    tcfg = cfg.train_config(checkpoint_dir=os.path.join(out_dir, "checkpoints"),
                            log_path=os.path.join(out_dir, "train_log.csv"))
    model, records = adversarial_train(
        model, (train_ds.images, train_ds.labels), tcfg, (val.images, val.labels),
        progress=lambda r: log.info("epoch %d  adv val loss %.4f  clean val acc %.2f", r.epoch, r.adv_val_loss,
                                    r.clean_val_acc))
    final = os.path.join(out_dir, "model.afck")
    sel = [r for r in records if r.selected]
    meta = {"arch": cfg.arch, "pnil": int(cfg.pnil), "selected_epoch": sel[0].epoch if sel else 0}
    save_checkpoint(final, model, meta)
    artifacts = [final] + [r.path for r in records if r.path]
    if records:
        artifacts.append(tcfg.log_path)
    return model, records, artifacts


def _eval_one(cfg: RunConfig, model, x, y, workers) -> EvalReport:
    return evaluate_robustness(model, (x, y), cfg.eval_attacks, eot_L=cfg.eot_L if model.stochastic else 1,
                               eps=cfg.eps_value, seed=derive_seed(cfg.seed, "eval"), spsa_subset=cfg.spsa_subset,
                               pgd_steps=cfg.pgd_steps, spsa_samples=cfg.spsa_samples, spsa_steps=cfg.spsa_steps,
                               workers=workers)


def _report_json(report: EvalReport) -> dict:
    return {
        "accuracies": report.accuracies,
        "counts": report.counts,
        "effective_robustness": report.effective_robustness,
        "obfuscated": report.obfuscated,
        "eot_L": report.eot_L,
        "config_hash": report.config_hash,
        "spsa_indices": report.spsa_indices,
    }


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    train = _load_split(cfg, "train")
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    snap = os.path.join(out, "config.cfg")
    with open(snap, "w") as fh:
        fh.write(dump_config(cfg))
    _, records, artifacts = _train_one(cfg, train, out)
    man = _write_manifest(out, "train", cfg, args.config, artifacts + [snap], args.workers)
    print(f"trained {len(records)} epochs; checkpoint {os.path.join(out, 'model.afck')}; manifest {man}")
    return EXIT_OK


def _load_model(cfg, ds, path):
    model = _model_for(cfg, ds)
    tensors, _meta = load_checkpoint(path)
    model.load_state_dict(tensors)
    return model


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    test = _load_split(cfg, "test")
    model = _load_model(cfg, test, args.checkpoint)
    report = _eval_one(cfg, model, test.images, test.labels, args.workers)
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    name = "pnil" if cfg.pnil else "baseline"
    csv_path = os.path.join(out, "report.csv")
    txt_path = os.path.join(out, "report.txt")
    json_path = os.path.join(out, "report.json")
    write_report_csv(csv_path, {name: report})
    table = format_table({name: report}, columns=report.columns())
    with open(txt_path, "w") as fh:
        fh.write(table)
        if report.obfuscated:
            fh.write("warning: SPSA accuracy is more than 10 points below PGD accuracy (gradient obfuscation)\n")
    with open(json_path, "w") as fh:
        json.dump({name: _report_json(report)}, fh, indent=2, sort_keys=True)
    _write_manifest(out, "eval", cfg, args.config, [csv_path, txt_path, json_path], args.workers,
                    {"checkpoint": args.checkpoint})
    print(table, end="")
    return EXIT_OK


def cmd_attack(args) -> int:
    cfg = resolve_config(args)
    test = _load_split(cfg, "test")
    model = _load_model(cfg, test, args.checkpoint).eval()
    n = min(args.count, len(test))
    x, y = test.images[:n], test.labels[:n]
    acfg = AttackConfig(kind=args.kind, eps=cfg.eps_value, eot_L=cfg.eot_L if model.stochastic else 1,
                        steps=cfg.pgd_steps if args.kind == "pgd" else (cfg.spsa_steps if args.kind == "spsa" else None),
                        spsa_samples=cfg.spsa_samples)
    x_adv = generate(model, x, y, acfg, derive_seed(cfg.seed, "attack", args.kind), workers=args.workers)
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, f"adversarial_{args.kind}.afck")
    save_checkpoint(path, {"x_adv": x_adv, "delta": x_adv - x, "labels": y.astype(np.float32)},
                    {"kind": args.kind, "eps": cfg.eps})
    _write_manifest(out, "attack", cfg, args.config, [path], args.workers, {"checkpoint": args.checkpoint})
    print(f"wrote {n} adversarial examples to {path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    s = run_gradcheck(args.networks, args.seed)
    fams = ", ".join(f"{k}: {v}" for k, v in sorted(s.families.items()))
    print(f"{s.networks} networks ({fams}); {s.coordinates} coordinates; max relative error {s.max_error:.3e}")
    for f in s.failures:
        print(f"FAIL network {f.network} {f.tensor}{list(f.index)}: analytic {f.analytic:.6e} "
              f"numeric {f.numeric:.6e} error {f.error:.3e}")
    print("gradcheck " + ("passed" if s.passed else "FAILED"))
    return EXIT_OK if s.passed else EXIT_NUMERIC


def _experiment_state(path):
    if not os.path.exists(path):
        return {"runs": {}}
    try:
        with open(path) as fh:
            state = json.load(fh)
        if not isinstance(state.get("runs"), dict):
            raise ValueError("missing runs table")
        return state
    except (ValueError, json.JSONDecodeError) as exc:
        raise ExperimentStateError(f"corrupted experiment state {path}: {exc}") from exc


class ExperimentStateError(RuntimeError):
    pass


def cmd_experiment(args) -> int:
    cfg = resolve_config(args)
    train = _load_split(cfg, "train")
    test = _load_split(cfg, "test")
    plan = make_cv_plan(len(train), len(test), repeats=cfg.repeats, seed=derive_seed(cfg.seed, "cv"),
                        folds=cfg.folds)
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    state_path = os.path.join(out, "experiment_state.json")
    state = _experiment_state(state_path)
    if state.get("config") not in (None, cfg.to_dict()):
        raise ExperimentStateError(f"{state_path} was produced by a different configuration")
    state["config"] = cfg.to_dict()
    artifacts = [state_path]
    for pnil in (True, False):
        label = "pnil" if pnil else "baseline"
        for run in plan:
            key = f"{label}/r{run.repeat}f{run.fold}"
            run_dir = os.path.join(out, label, f"repeat{run.repeat}_fold{run.fold}")
            if key in state["runs"]:
                artifacts += state["runs"][key]["artifacts"]
                continue
            rc = cfg.replace(pnil=pnil, seed=derive_seed(cfg.seed, "run", run.repeat, run.fold))
            tr = train.subset(run.train_idx)
            te = test.subset(run.test_idx)
            model, _, arts = _train_one(rc, tr, run_dir)
            rep = _eval_one(rc, model, te.images, te.labels, args.workers)
            state["runs"][key] = {"report": _report_json(rep), "artifacts": arts,
                                  "n_train": len(tr), "n_test": len(te)}
            artifacts += arts
            tmp = state_path + ".tmp"
            with open(tmp, "w") as fh:
                json.dump(state, fh, indent=2, sort_keys=True)
            os.replace(tmp, state_path)
            log.info("%s done: %s", key, rep.accuracies)
    table, csv_path, txt_path = _render_experiment(state, out, cfg.significance)
    artifacts += [csv_path, txt_path]
    _write_manifest(out, "experiment", cfg, args.config, artifacts, args.workers)
    print(table, end="")
    return EXIT_OK


def ttest_ratio(configured, sizes):
    """Test/train size ratio for the corrected t-test.

    ``configured`` wins when set; otherwise the mean of n_test / n_train over
    the ``(n_test, n_train)`` pairs in ``sizes``.
    """
    if configured is not None:
        return float(configured)
    if not sizes:
        raise ValueError("no runs to measure the test/train ratio from")
    return float(np.mean([n_te / n_tr for n_te, n_tr in sizes]))


def _render_experiment(state, out, alpha=0.003):
    per = {"pnil": {}, "baseline": {}}
    sizes = []
    for key in sorted(state["runs"]):
        label, run = key.split("/")
        rep = state["runs"][key]["report"]
        per[label][run] = dict(rep["accuracies"], min=rep["effective_robustness"])
        sizes.append((state["runs"][key]["n_test"], state["runs"][key]["n_train"]))
    cols = []
    for runs in per.values():
        for r in runs.values():
            cols += [c for c in r if c not in cols and c != "min"]
    rows, stars, tests = {}, {}, {}
    for label, runs in per.items():
        if runs:
            rows[label] = {c: [r[c] for _, r in sorted(runs.items()) if c in r] for c in cols + ["min"]}
    paired = sorted(set(per["pnil"]) & set(per["baseline"]))
    ratio = ttest_ratio(state.get("config", {}).get("ttest_ratio"), sizes)
    if len(paired) >= 2:
        for c in cols + ["min"]:
            d = [per["pnil"][k][c] - per["baseline"][k][c] for k in paired]
            res = corrected_resampled_ttest(d, ratio=ratio, alpha=alpha)
            tests[c] = res
            if res.significant:
                stars.setdefault("pnil", set()).add(c)
    table = format_table(rows, columns=cols, stars=stars)
    if "min" in tests:
        r = tests["min"]
        table += (f"\neffective robustness difference (pnil - baseline): mean {r.mean_diff:.2f}, "
                  f"t = {r.t:.4f}, p = {r.p:.4g}, n = {r.n}, alpha = {alpha}"
                  f"{' (significant)' if r.significant else ''}\n")
    csv_path = os.path.join(out, "experiment_report.csv")
    rows_out = []
    for label, runs in per.items():
        for run, accs in sorted(runs.items()):
            rows_out.append([label, run] + [accs.get(c, float("nan")) for c in cols + ["min"]])
    write_curve_csv(csv_path, ["config", "run"] + cols + ["min"], rows_out)
    txt_path = os.path.join(out, "experiment_report.txt")
    with open(txt_path, "w") as fh:
        fh.write(table)
    return table, csv_path, txt_path


def cmd_lr_find(args) -> int:
    cfg = resolve_config(args)
    train = _load_split(cfg, "train")
    model = _model_for(cfg, train)
    tc = cfg.train_config()
    curve = lr_range_test(model, train.images, train.labels, (cfg.lr_span_lo, cfg.lr_span_hi), cfg.lr_iters,
                          cfg.batch_size, derive_seed(cfg.seed, "lr-find"), tc.attack)
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "lr_curve.csv")
    write_curve_csv(path, ["lr", "smoothed_loss", "loss"], list(zip(curve.lrs, curve.losses, curve.raw)))
    lo, hi = curve.suggest()
    _write_manifest(out, "lr-find", cfg, args.config, [path], args.workers)
    print(f"suggested lr bounds: lr_lo = {lo:.3g}, lr_hi = {hi:.3g}" + (" (sweep diverged early)" if curve.diverged else ""))
    return EXIT_OK


def cmd_report(args) -> int:
    rows = {}
    for d in args.results:
        if os.path.exists(os.path.join(d, "experiment_state.json")):
            table, _, _ = _render_experiment(_experiment_state(os.path.join(d, "experiment_state.json")), d)
            print(table, end="")
            continue
        path = os.path.join(d, "report.json")
        if not os.path.exists(path):
            raise FileNotFoundError(f"no report.json or experiment_state.json in {d}")
        with open(path) as fh:
            for name, rep in json.load(fh).items():
                label = name if name not in rows else f"{name} ({d})"
                rows[label] = EvalReport(rep["accuracies"], rep["counts"], rep["eot_L"], rep["config_hash"])
    if rows:
        cols = []
        for r in rows.values():
            cols += [c for c in r.columns() if c not in cols]
        table = format_table(rows, columns=cols)
        print(table, end="")
        if args.out:
            with open(args.out, "w") as fh:
                fh.write(table)
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "attack": cmd_attack,
    "gradcheck": cmd_gradcheck,
    "experiment": cmd_experiment,
    "lr-find": cmd_lr_find,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (TrainingDiverged, T.NonFiniteError, ArithmeticError) as exc:
        print(f"advtrain: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CheckpointError, DataFormatError, FileNotFoundError, ExperimentStateError,
            ValueError) as exc:
        print(f"advtrain: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
