"""``mmcert`` command line: gen | train | certify | attack | oracle | report.

Every command reads the experiment config, works inside the run directory
and writes deterministic files (sorted JSON keys, ``repr`` floats, no
timestamps).  Exit codes: 0 success, 1 usage or config error, 2 numeric
divergence, 3 soundness violation found by ``oracle``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import data as datamod
from .attacks import AttackSpec, min_radius_oracle, run_attack
from .certify import (certify_batch, estimate_lipschitz, ratio_deviation, vulnerability_indicators,
                      write_certificates, write_matrix)
from .config import ConfigError, gen_spec, load_config, model_config, train_config
from .model import ModelError, init_model, load_checkpoint, logits, save_checkpoint
from .rng import PortableRNG
from .train import (DivergenceError, TrainingError, train_crmt, train_crmt_at, train_jt,
                    train_ojt)

log = logging.getLogger("mmcert")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_UNSOUND = 0, 1, 2, 3
STRATEGIES = {"jt": ("standard", train_jt), "ojt": ("orthogonal", train_ojt),
              "crmt": ("orthogonal", train_crmt), "crmt-at": ("orthogonal", train_crmt_at)}
CHUNK = 100  # fixed sample chunk, independent of --jobs, so outputs never depend on it
SOUNDNESS_SLACK = 1e-6


class UsageError(Exception):
    pass


class SoundnessViolation(Exception):
    pass


def _dump(obj, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


def _num(x):
    x = float(x)
    return x if np.isfinite(x) else ("inf" if x > 0 else "-inf" if x < 0 else "nan")


def _run_dir(cfg) -> Path:
    out = Path(cfg["output_dir"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from None
    return out


def _load_split(out, split):
    path = out / "data" / f"{split}.csv"
    if not path.exists():
        raise UsageError(f"missing dataset file {path}; run 'mmcert gen' first")
    return datamod.load(path)


def _load_model(out, strategy, checkpoint=None):
    prefix = Path(checkpoint) if checkpoint else out / "models" / strategy
    if not prefix.with_suffix(".json").exists():
        raise UsageError(f"missing checkpoint {prefix}.json; run 'mmcert train' first")
    return load_checkpoint(prefix)


def _check_dims(model, ds):
    if model.modality_dims != ds.dims or model.K != ds.K:
        raise UsageError(f"checkpoint dims {model.modality_dims} / K={model.K} do not match "
                         f"dataset dims {ds.dims} / K={ds.K}")


def _chunked(fn, args_list, jobs):
    if jobs <= 1 or len(args_list) <= 1:
        return [fn(*a) for a in args_list]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, *zip(*args_list)))


def _chunks(n):
    return [np.arange(i, min(n, i + CHUNK)) for i in range(0, n, CHUNK)]


def _target_name(targets):
    return "+".join(f"m{t + 1}" for t in targets)


# ---------------------------------------------------------------------------
# commands


def cmd_gen(cfg):
    out = _run_dir(cfg)
    train, test = datamod.generate(gen_spec(cfg))
    datamod.save(train, out / "data" / "train.csv")
    datamod.save(test, out / "data" / "test.csv")
    _dump({"version": datamod.FORMAT_VERSION, "preset": cfg["data"]["preset"],
           "spec": {k: v for k, v in cfg["data"].items() if k != "preset"},
           "n_train": len(train), "n_test": len(test)}, out / "data" / "manifest.json")
    _dump(cfg, out / "config.json")
    return EXIT_OK


def cmd_train(cfg, strategy):
    if strategy not in STRATEGIES:
        raise UsageError(f"unknown strategy {strategy!r}; choose from {sorted(STRATEGIES)}")
    out = _run_dir(cfg)
    train = _load_split(out, "train")
    head, trainer = STRATEGIES[strategy]
    model = init_model(model_config(cfg, head), cfg["model"]["seed"])
    _check_dims(model, train)
    tconf = train_config(cfg)
    try:
        model, trace = trainer(model, train, tconf)
    except DivergenceError as exc:
        if exc.trace is not None:
            exc.trace.write_csv(out / "traces" / f"{strategy}.csv")
        raise
    save_checkpoint(model, out / "models" / strategy)
    trace.write_csv(out / "traces" / f"{strategy}.csv")
    _dump({"strategy": strategy, "head": model.kind, "epochs": len(trace.records),
           "notes": trace.notes}, out / "traces" / f"{strategy}.json")
    return EXIT_OK


def _certify_chunk(model, xs, ys, ids, tau_scale):
    est = estimate_lipschitz(model)
    if tau_scale != 1.0:
        est = est.scaled(tau_scale)
    return certify_batch(model, xs, ys, est, ids=ids)


def _certify_all(model, ds, jobs, tau_scale=1.0, rows=None):
    rows = np.arange(len(ds)) if rows is None else np.asarray(rows)
    args = [(model, [x[rows[c]] for x in ds.xs], ds.y[rows[c]], rows[c], tau_scale)
            for c in _chunks(rows.size)]
    return [r for part in _chunked(_certify_chunk, args, jobs) for r in part]


def cmd_certify(cfg, strategy, checkpoint=None, tau_scale=1.0):
    out = _run_dir(cfg)
    ds = _load_split(out, cfg["certify"]["split"])
    model = _load_model(out, strategy, checkpoint)
    _check_dims(model, ds)
    reports = _certify_all(model, ds, int(cfg["jobs"]), tau_scale)
    dest = out / "certify" / strategy
    write_certificates(reports, dest / "certificates.csv")
    est = estimate_lipschitz(model).scaled(tau_scale)
    _, ratio = vulnerability_indicators(model, est)
    write_matrix(ratio, dest / "eta_ratio.csv")
    valid = [r for r in reports if r.valid]
    radii = np.array([r.radius_mm for r in valid])
    uni = np.array([r.radius_uni for r in valid]) if valid else np.zeros((0, model.n_modalities))
    _dump({
        "strategy": strategy,
        "bound": "orthogonal" if model.kind == "orthogonal" else "standard",
        "head": model.kind,
        "n_samples": len(reports),
        "n_valid": len(valid),
        "n_misclassified": len(reports) - len(valid),
        "clean_acc": _num(np.mean([r.pred == r.y for r in reports])),
        "mean_radius": _num(radii.mean()) if radii.size else 0.0,
        "median_radius": _num(np.median(radii)) if radii.size else 0.0,
        "mean_radius_uni": [_num(np.mean(uni[:, m][np.isfinite(uni[:, m])]))
                            if np.any(np.isfinite(uni[:, m])) else "inf"
                            for m in range(model.n_modalities)],
        "lipschitz_encoder": [_num(v) for v in est.encoder],
        "eta_ratio_deviation": _num(ratio_deviation(ratio)),
        "tau_scale": tau_scale,
    }, dest / "summary.json")
    return EXIT_OK


def _attack_chunk(model, xs, ys, ids, spec_kwargs):
    return run_attack(model, xs, ys, AttackSpec(**spec_kwargs), ids=ids).success


def sweep_specs(cfg, n_modalities):
    """``(family, targets, epsilon, spec kwargs)`` for every row of the attack sweep."""
    acfg = cfg["attack"]
    unit = float(acfg["epsilon_unit"])
    single = [(m,) for m in range(n_modalities)]
    joint = tuple(range(n_modalities))
    rows = []
    for family in acfg["families"]:
        if family == "missing":
            for t in single:
                rows.append((family, t, 0.0, {"family": family, "targets": t}))
            continue
        if family not in ("pgd_l2", "fgm", "gaussian_noise", "feature_mask"):
            raise UsageError(f"unknown attack family {family!r}")
        for t in [joint] + single:
            for g in [0.0] + [float(v) for v in acfg["grid"]]:
                eps = g if family == "feature_mask" else g * unit
                kw = {"family": family, "epsilon": eps, "targets": t, "seed": acfg["seed"]}
                if family == "pgd_l2":
                    kw["steps"] = acfg["steps"]
                rows.append((family, t, eps, kw))
    return rows


def cmd_attack(cfg, strategy, checkpoint=None):
    out = _run_dir(cfg)
    ds = _load_split(out, cfg["attack"]["split"])
    model = _load_model(out, strategy, checkpoint)
    _check_dims(model, ds)
    jobs = int(cfg["jobs"])
    clean = float(np.mean(np.argmax(logits(model, ds.xs), axis=1) == ds.y))
    lines = []
    for family, targets, eps, kw in sweep_specs(cfg, model.n_modalities):
        args = [(model, [x[c] for x in ds.xs], ds.y[c], c, kw) for c in _chunks(len(ds))]
        success = np.concatenate(_chunked(_attack_chunk, args, jobs))
        lines.append((eps, family, _target_name(targets), float(np.mean(~success)), len(ds)))
    dest = out / "attack" / strategy
    dest.mkdir(parents=True, exist_ok=True)
    with (dest / "sweep.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epsilon", "family", "target", "accuracy", "n_samples"])
        for eps, family, target, acc, n in lines:
            writer.writerow([repr(eps), family, target, repr(acc), n])
    _dump({"strategy": strategy, "clean_acc": clean, "epsilon_unit": cfg["attack"]["epsilon_unit"],
           "n_rows": len(lines)}, dest / "summary.json")
    return EXIT_OK


def _oracle_chunk(model, xs, ys, ids, targets, ocfg):
    return min_radius_oracle(model, xs, ys, targets, tol=ocfg["tol"], steps=ocfg["steps"],
                             restarts=ocfg["restarts"], seed=ocfg["seed"], ids=ids)


def oracle_sample(ds, model, n_samples, seed):
    """Seeded choice of up to ``n_samples`` correctly classified rows, in input order."""
    correct = np.flatnonzero(np.argmax(logits(model, ds.xs), axis=1) == ds.y)
    order = correct[PortableRNG(seed, stream=0x0AC1E).permutation(correct.size)]
    return np.sort(order[:n_samples])


def cmd_oracle(cfg, strategy, checkpoint=None, tau_scale=1.0, n_samples=None, tol=None):
    out = _run_dir(cfg)
    ocfg = dict(cfg["oracle"])
    if n_samples is not None:
        ocfg["n_samples"] = int(n_samples)
    if tol is not None:
        ocfg["tol"] = float(tol)
    ds = _load_split(out, ocfg["split"])
    model = _load_model(out, strategy, checkpoint)
    _check_dims(model, ds)
    jobs = int(cfg["jobs"])
    rows = oracle_sample(ds, model, ocfg["n_samples"], ocfg["seed"])
    reports = _certify_all(model, ds, jobs, tau_scale, rows)
    l = model.n_modalities
    kinds = [("multimodal", tuple(range(l)))] + [(f"uni_m{m + 1}", (m,)) for m in range(l)]
    table = {"id": rows}
    violations, slack_summary = [], {}
    for kind, targets in kinds:
        args = [(model, [x[rows[c]] for x in ds.xs], ds.y[rows[c]], rows[c], targets, ocfg)
                for c in _chunks(rows.size)]
        oracle = np.concatenate(_chunked(_oracle_chunk, args, jobs)) if rows.size else np.zeros(0)
        if kind == "multimodal":
            cert = np.array([r.radius_mm for r in reports])
        else:
            cert = np.array([r.radius_uni[targets[0]] for r in reports])
        with np.errstate(invalid="ignore"):
            slack = oracle - cert
        bad = cert > oracle + SOUNDNESS_SLACK
        for i in np.flatnonzero(bad):
            violations.append({"id": int(rows[i]), "kind": kind, "certified": _num(cert[i]),
                               "oracle": _num(oracle[i])})
        finite = slack[np.isfinite(slack)]
        slack_summary[kind] = {
            "n": int(rows.size),
            "n_oracle_inf": int(np.sum(np.isinf(oracle))),
            "n_certified_inf": int(np.sum(np.isinf(cert))),
            "violations": int(bad.sum()),
            "min_slack": _num(finite.min()) if finite.size else "nan",
            "slack_quantiles": {q: _num(np.quantile(finite, float(q))) if finite.size else "nan"
                                for q in ("0.0", "0.01", "0.05", "0.25", "0.5")},
        }
        table[f"certified_{kind}"] = cert
        table[f"oracle_{kind}"] = oracle
    dest = out / "oracle" / strategy
    dest.mkdir(parents=True, exist_ok=True)
    cols = list(table)
    with (dest / "oracle.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for i in range(rows.size):
            writer.writerow([int(rows[i])] + [repr(float(table[c][i])) for c in cols[1:]])
    _dump({"strategy": strategy, "head": model.kind, "n_samples": int(rows.size),
           "tol": ocfg["tol"], "tau_scale": tau_scale, "violation_count": len(violations),
           "violations": violations, "kinds": slack_summary}, dest / "report.json")
    if violations:
        raise SoundnessViolation(f"{len(violations)} soundness violations for {strategy}")
    return EXIT_OK


def _read_csv(path):
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def gap_curve(sweep_rows, n_modalities=2):
    """Per-budget PGD accuracy on modality 1 and 2 and their difference."""
    acc = {}
    for r in sweep_rows:
        if r["family"] == "pgd_l2" and r["target"] in ("m1", "m2"):
            acc.setdefault(float(r["epsilon"]), {})[r["target"]] = float(r["accuracy"])
    return [(eps, v["m1"], v["m2"], v["m1"] - v["m2"])
            for eps, v in sorted(acc.items()) if "m1" in v and "m2" in v]


def cmd_report(cfg):
    out = Path(cfg["output_dir"])
    if not out.is_dir():
        raise UsageError(f"run directory {out} does not exist")
    models = sorted(p.stem for p in (out / "models").glob("*.json")) if (out / "models").is_dir() else []
    missing = []
    if not models:
        missing.append(str(out / "models"))
    report = {"config": cfg, "strategies": {}}
    dest = out / "report"
    dest.mkdir(parents=True, exist_ok=True)
    for s in models:
        entry = {}
        trace = out / "traces" / f"{s}.csv"
        if trace.exists():
            rows = _read_csv(trace)
            entry["epochs"] = len(rows)
            entry["final_epoch"] = {k: float(v) for k, v in rows[-1].items()} if rows else {}
        else:
            missing.append(str(trace))
        cert = out / "certify" / s / "summary.json"
        if cert.exists():
            entry["certify"] = json.loads(cert.read_text())
        else:
            missing.append(str(cert))
        sweep = out / "attack" / s / "sweep.csv"
        if sweep.exists():
            rows = _read_csv(sweep)
            entry["attack"] = [{"epsilon": float(r["epsilon"]), "family": r["family"],
                                "target": r["target"], "accuracy": float(r["accuracy"])}
                               for r in rows]
            curve = gap_curve(rows)
            with (dest / f"gap_{s}.csv").open("w", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(["epsilon", "acc_m1", "acc_m2", "gap"])
                for row in curve:
                    writer.writerow([repr(v) for v in row])
            entry["max_abs_gap"] = max((abs(g) for *_, g in curve), default=0.0)
        else:
            missing.append(str(sweep))
        orc = out / "oracle" / s / "report.json"
        if orc.exists():
            o = json.loads(orc.read_text())
            entry["oracle"] = {"violation_count": o["violation_count"], "n_samples": o["n_samples"]}
        report["strategies"][s] = entry
    if missing:
        raise UsageError("missing inputs: " + ", ".join(missing))
    _dump(report, dest / "report.json")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="mmcert", description="Certified robustness experiments for late-fusion "
                     "multi-modal classifiers.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, strategy=False):
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--seed", type=int, help="override the global seed")
        p.add_argument("--out", help="run directory (overrides output_dir)")
        p.add_argument("--jobs", type=int, help="worker processes for sample sweeps")
        if strategy:
            p.add_argument("--strategy", default="crmt", help="jt | ojt | crmt | crmt-at")
            p.add_argument("--checkpoint", help="checkpoint prefix (default: run dir model)")

    common(sub.add_parser("gen", help="generate train/test datasets"))
    common(sub.add_parser("train", help="train one strategy"), strategy=True)
    p = sub.add_parser("certify", help="certified radii for a checkpoint")
    common(p, strategy=True)
    p.add_argument("--tau-scale", type=float, default=1.0, help=argparse.SUPPRESS)
    common(sub.add_parser("attack", help="attack sweep for a checkpoint"), strategy=True)
    p = sub.add_parser("oracle", help="compare certificates with the attack oracle")
    common(p, strategy=True)
    p.add_argument("--n-samples", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--tau-scale", type=float, default=1.0,
                   help="multiply Lipschitz estimates (fault injection)")
    common(sub.add_parser("report", help="merge run outputs into a report"))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed, args.out)
        if args.jobs is not None:
            if args.jobs < 1:
                raise UsageError("--jobs must be >= 1")
            cfg["jobs"] = args.jobs
        if args.command == "gen":
            return cmd_gen(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.strategy)
        if args.command == "certify":
            return cmd_certify(cfg, args.strategy, args.checkpoint, args.tau_scale)
        if args.command == "attack":
            return cmd_attack(cfg, args.strategy, args.checkpoint)
        if args.command == "oracle":
            return cmd_oracle(cfg, args.strategy, args.checkpoint, args.tau_scale,
                              args.n_samples, args.tol)
        return cmd_report(cfg)
    except (UsageError, ConfigError, datamod.DatasetError, ModelError, TrainingError) as exc:
        if isinstance(exc, DivergenceError):
            print(f"mmcert: diverged: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
        print(f"mmcert: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SoundnessViolation as exc:
        print(f"mmcert: {exc}", file=sys.stderr)
        return EXIT_UNSOUND


if __name__ == "__main__":
    sys.exit(main())
