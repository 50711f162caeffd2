"""``gdr`` command line: train, gdr, attack, combine, verify.

All randomness comes from three named seeds (data, init, attack). Every
report embeds them together with a hash of the resolved configuration.

Exit codes: 0 success, 1 failed run or failed check, 2 bad usage or config.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import data_io, geometry, metrics, network, trainer, verify
from .attacks import AttackConfig

logger = logging.getLogger("gradient_diversity.cli")

REPORT_SCHEMA_VERSION = 1
MASS_THRESHOLD = 0.05


class CliError(RuntimeError):
    """A diagnostic for the user; reported on stderr with exit code 1."""


def _write_json(path: Path, doc) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n")
    tmp.replace(path)
    return path


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return str(obj)


def _stamp(cfg: cfgmod.ExperimentConfig) -> dict:
    d = cfg.to_dict()
    return {"schema_version": REPORT_SCHEMA_VERSION, "config_hash": metrics.config_digest(d),
            "seeds": dict(d["seeds"])}


def load_data(cfg: cfgmod.ExperimentConfig) -> tuple[data_io.Dataset, data_io.Dataset]:
    """Train and test splits described by the ``[data]`` section."""
    d, seed = cfg.data, cfg.seeds.data
    if d.source == "blobs":
        full = data_io.synthetic_blobs(d.n, d.classes, d.per_class, d.spread, seed)
        if d.test_count >= len(full):
            raise CliError(f"test_count {d.test_count} leaves no training data ({len(full)} generated)")
        train, test = data_io.train_test_split(full, d.test_count, [seed, 1])
        if d.train_count < len(train):
            train = data_io.subset(train, d.train_count, [seed, 2], d.stratified)
        return train, test
    try:
        train = data_io.load_idx_dir(d.data_dir, d.source, "train")
        test = data_io.load_idx_dir(d.data_dir, d.source, "test")
    except FileNotFoundError as exc:
        raise CliError(f"{d.source} data missing: {exc}. Run scripts/fetch_data.py --dataset "
                       f"{d.source} --out {d.data_dir}, or set data.source = blobs") from exc
    try:
        train = data_io.subset(train, min(d.train_count, len(train)), [seed, 2], d.stratified)
        test = data_io.subset(test, min(d.test_count, len(test)), [seed, 3], d.stratified)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    return train, test


def train_config(cfg: cfgmod.ExperimentConfig, index: int, baseline: bool) -> trainer.TrainConfig:
    """Per-ensemble trainer settings; ensemble ``index`` gets its own init and shuffle streams."""
    t = cfg.train
    seq = np.random.SeedSequence([cfg.seeds.init, index])
    init_seed, shuffle_seed = (int(s) for s in seq.generate_state(2))
    return trainer.TrainConfig(
        beta=t.beta,
        phase_schedule=list(t.baseline_schedule if baseline else t.schedule),
        learning_rate=t.learning_rate,
        batch_size=t.batch_size,
        seed=init_seed,
        shuffle_seed=shuffle_seed ^ cfg.seeds.data,
        n_members=cfg.ensemble.size,
        hidden=cfg.ensemble.hidden,
        temperature=t.temperature,
    )


def ensemble_names(cfg: cfgmod.ExperimentConfig) -> list[tuple[str, bool]]:
    e = cfg.ensemble
    return [(f"reg{i}", False) for i in range(e.regularized)] + [(f"base{i}", True) for i in range(e.baselines)]


def cmd_train(cfg: cfgmod.ExperimentConfig, out: Path) -> int:
    train, test = load_data(cfg)
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.write_config(cfg, out / "config.ini")
    report = {**_stamp(cfg), "ensembles": {}}
    for index, (name, baseline) in enumerate(ensemble_names(cfg)):
        tc = train_config(cfg, index, baseline)
        on_epoch = None
        if cfg.train.checkpoints:
            def on_epoch(epoch, ens, rec, name=name):
                network.save_ensemble(ens, out / "checkpoints" / name / f"epoch_{epoch:03d}")
        logger.info("training %s (%s)", name, "baseline" if baseline else "regularized")
        try:
            ens, log = trainer.train_ensemble(tc, train.X, train.y, train.n_classes, on_epoch=on_epoch)
        except trainer.TrainingDivergedError as exc:
            exc.log.to_csv(out / "logs" / f"{name}.csv")
            raise CliError(f"{name}: training diverged: {exc}") from exc
        ens = network.Ensemble(ens.models, [f"{name}_m{i}" for i in range(len(ens))])
        directory = network.save_ensemble(ens, out / "ensembles" / name)
        log.to_csv(out / "logs" / f"{name}.csv")
        report["ensembles"][name] = {
            "directory": str(directory),
            "baseline": baseline,
            "schedule": tc.phase_schedule,
            "test_consensus_accuracy": metrics.consensus_accuracy(ens, test.X, test.y),
            "train_consensus_accuracy": log.records[-1].consensus_accuracy,
        }
    _write_json(out / "train_report.json", report)
    print(f"trained {len(report['ensembles'])} ensemble(s) into {out / 'ensembles'}")
    return 0


def _load_ensembles(dirs: list[str]) -> dict[str, network.Ensemble]:
    out = {}
    for d in dirs:
        path = Path(d)
        try:
            ens = network.load_ensemble(path)
        except (FileNotFoundError, network.ModelFormatError) as exc:
            raise CliError(f"cannot load ensemble {path}: {exc}") from exc
        name = path.resolve().name
        while name in out:
            name += "_"
        out[name] = ens
    return out


def _gdr_of(cfg, ens, X, y) -> geometry.GDRResult:
    g = cfg.gdr
    count = min(g.count, X.shape[0])
    policy = geometry.RatingPolicy(g.method, g.samples, cfg.seeds.attack)
    return geometry.gdr(ens, X[:count], y[:count], policy, correct_only=g.correct_only)


def cmd_gdr(cfg: cfgmod.ExperimentConfig, out: Path, ensemble_dirs: list[str]) -> int:
    _, test = load_data(cfg)
    ensembles = _load_ensembles(ensemble_dirs)
    doc = {**_stamp(cfg), "policy": {"method": cfg.gdr.method, "samples": cfg.gdr.samples}, "ensembles": {}}
    for name, ens in ensembles.items():
        res = _gdr_of(cfg, ens, test.X, test.y)
        csv_path = geometry.write_ratings_csv(out / f"{name}_ratings.csv", res)
        counts, edges = res.histogram()
        doc["ensembles"][name] = {
            "gdr": res.gdr,
            "examples": len(res.ratings),
            "zero_gradient_examples": res.zero_gradient_examples,
            f"mass_below_{MASS_THRESHOLD}": res.mass_below(MASS_THRESHOLD),
            "histogram": {"counts": counts, "edges": edges},
            "ratings_csv": csv_path.name,
            "members": list(ens.names),
        }
        print(f"{name}: GDR = {res.gdr:.6f} over {len(res.ratings)} examples")
    _write_json(out / "gdr.json", doc)
    return 0


def attack_configs(cfg: cfgmod.ExperimentConfig) -> list[AttackConfig]:
    a = cfg.attack
    out = []
    for kind in a.kinds:
        for eps in a.epsilons:
            steps = {"fgsm": None, "pgd_linf": a.pgd_steps, "mi": a.mi_steps}[kind]
            out.append(AttackConfig(
                kind, eps, steps=steps,
                momentum_decay=a.momentum_decay if kind == "mi" else None,
                random_start=a.random_start, seed=cfg.seeds.attack,
            ))
    return out


def exponential_fits(rows: list[dict]) -> list[dict]:
    """``y = a * exp(b * gdr)`` per (attack, epsilon) series, for success and CR where defined."""
    series: dict = {}
    for r in rows:
        series.setdefault((r["attack"], r["epsilon"]), []).append(r)
    fits = []
    for (kind, eps), rs in sorted(series.items()):
        for target in ("ensemble_success", "collaboration_rating"):
            pts = [(r["gdr"], r[target]) for r in rs if r[target] is not None and r[target] > 0]
            entry = {"attack": kind, "epsilon": eps, "target": target, "points": len(pts)}
            try:
                entry["a"], entry["b"] = metrics.fit_exponential(pts)
            except ValueError as exc:
                entry["a"] = entry["b"] = None
                entry["reason"] = str(exc)
            fits.append(entry)
    return fits


def cmd_attack(cfg: cfgmod.ExperimentConfig, out: Path, ensemble_dirs: list[str]) -> int:
    _, test = load_data(cfg)
    ensembles = _load_ensembles(ensemble_dirs)
    stamp = _stamp(cfg)
    rows = []
    width = 0
    for name, ens in ensembles.items():
        width = max(width, len(ens))
        ens_gdr = _gdr_of(cfg, ens, test.X, test.y).gdr
        for ac in attack_configs(cfg):
            count = cfg.attack.count if ac.kind == "fgsm" else cfg.attack.iterative_count
            X, y = test.X[:count], test.y[:count]
            try:
                report = metrics.evaluate(ens, X, y, ac, ens_gdr, stamp["seeds"], stamp["config_hash"])
            except metrics.EmptyTestSetError as exc:
                raise CliError(f"{name}: {exc}") from exc
            _write_json(out / "reports" / f"{name}_{ac.kind}_eps{ac.epsilon:g}.json", report.to_dict())
            rows.append(metrics.sweep_row(name, report))
            cr = "null" if report.collaboration_rating is None else f"{report.collaboration_rating:.4g}"
            print(f"{name} {ac.kind} eps={ac.epsilon:g}: success={report.ensemble_success:.4f} CR={cr}")
    metrics.write_sweep_csv(out / "sweep.csv", rows, width)
    _write_json(out / "fits.json", {**stamp, "model": "y = a * exp(b * gdr)", "fits": exponential_fits(rows)})
    return 0


def cmd_combine(out: Path, members: list[str]) -> int:
    """Write a manifest referencing existing member files, e.g. to recombine training runs.

    Each member is ``path/to/file.gden`` or ``ENSEMBLE_DIR:INDEX``.
    """
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for spec in members:
        directory, sep, index = spec.rpartition(":")
        if sep and index.isdigit() and Path(directory).is_dir():
            doc = json.loads((Path(directory) / network.MANIFEST_NAME).read_text())
            try:
                member = doc["members"][int(index)]
            except IndexError as exc:
                raise CliError(f"{directory} has no member {index}") from exc
            path, name = Path(directory) / member["file"], member["name"]
        else:
            path, name = Path(spec), Path(spec).stem
        if not path.is_file():
            raise CliError(f"member file {path} not found")
        network.load_model(path)  # fail early on a corrupt file
        entries.append({"name": name, "file": os.path.relpath(path.resolve(), out.resolve())})
    network.write_manifest(out, entries)
    network.load_ensemble(out)
    print(f"wrote {out / network.MANIFEST_NAME} with {len(entries)} member(s)")
    return 0


def cmd_verify() -> int:
    results = verify.run_checks()
    print(verify.format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return 1
    print(f"all {len(results)} checks passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI experiment config")
    common.add_argument("--preset", choices=cfgmod.PRESET_NAMES, default="desk")
    common.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
    common.add_argument("--seed-data", type=int)
    common.add_argument("--seed-init", type=int)
    common.add_argument("--seed-attack", type=int)
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")

    p = argparse.ArgumentParser(prog="gdr", description="Gradient Diversity Rating experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train regularized and baseline ensembles")
    for name, text in (("gdr", "rate ensembles on the test split"),
                       ("attack", "attack sweep with per-member successes and CR")):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("ensembles", nargs="+", help="ensemble directories (with manifest.json)")
    cp = sub.add_parser("combine", help="write a manifest mixing members of other ensembles")
    cp.add_argument("--out", type=Path, required=True)
    cp.add_argument("members", nargs="+", help="FILE.gden or ENSEMBLE_DIR:INDEX")
    sub.add_parser("verify", help="run the fast self-check suite")
    return p


def resolve_config(args) -> cfgmod.ExperimentConfig:
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise cfgmod.ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}", item)
        overrides[key.strip()] = value.strip()
    for flag, key in (("seed_data", "seeds.data"), ("seed_init", "seeds.init"), ("seed_attack", "seeds.attack")):
        if getattr(args, flag) is not None:
            overrides[key] = str(getattr(args, flag))
    return cfgmod.load_config(args.config, args.preset, overrides)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "verify":
            return cmd_verify()
        if args.command == "combine":
            return cmd_combine(args.out, args.members)
        cfg = resolve_config(args)
        if args.command == "train":
            return cmd_train(cfg, args.out)
        if args.command == "gdr":
            return cmd_gdr(cfg, args.out, args.ensembles)
        return cmd_attack(cfg, args.out, args.ensembles)
    except cfgmod.ConfigError as exc:
        print(f"gdr: config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"gdr: {exc}", file=sys.stderr)
        return 1
    except (CliError, ValueError, network.ModelFormatError) as exc:
        print(f"gdr: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
