"""``copycat`` command line: one binary, one subcommand per pipeline stage.

Numeric knobs live in the JSON experiment config; flags carry paths,
addresses and overrides only.  Exit codes: 0 ok, 2 config/input error,
3 oracle unreachable, 4 training diverged, 1 anything else.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, attack, nn, oracle
from .data import (LabeledDataset, Provenance, filter_classes, load_idx, load_idx_images, save_idx, synth_generic,
                   synth_problem, to_grayscale)
from .eval import agreement, macro_accuracy, performance_over


EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_NETWORK, EXIT_TRAINING = 0, 1, 2, 3, 4
SPLITS = ("odd", "pdd", "npdd", "td")
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# shared plumbing


def load_config(path, seed_override=None) -> attack.ExperimentConfig:
    if path is None:
        raise ConfigError("--config is required")
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        config = attack.ExperimentConfig.from_json(path)
        if seed_override is not None:
            config = replace(config, seeds=[int(seed_override)])
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"invalid config {path}: {exc}") from exc
    return config


def _seed(config: attack.ExperimentConfig) -> int:
    return int(config.seeds[0])


def _splits(config: attack.ExperimentConfig, seed: int) -> dict[str, LabeledDataset]:
    return synth_problem(replace(config.problem, seed=attack.stage_seeds(seed)["problem"]))


def _load_model(path) -> nn.Model:
    try:
        return nn.load_model(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"checkpoint not found: {path}") from exc
    except ValueError as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc


def _out_dir(path) -> Path:
    if path is None:
        raise ConfigError("--out is required")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


class Manifest:
    """Artifacts (relative to the output dir) plus a separate timings file.

    Wall-clock numbers go to ``timings.json`` so ``manifest.json`` stays
    byte-identical across reruns.
    """

    def __init__(self, out: Path, command: str, config: attack.ExperimentConfig | None = None):
        self.out = out
        self.doc = {"tool": "copycat", "version": __version__, "command": command,
                    "config_sha256": None if config is None else config.digest(), "artifacts": {}}
        self.timings: dict[str, float] = {}
        self._t0 = time.perf_counter()

    def add(self, name: str, filename: str) -> Path:
        self.doc["artifacts"][name] = filename
        return self.out / filename

    def time(self, stage: str, t0: float) -> None:
        self.timings[stage] = round(time.perf_counter() - t0, 3)

    def write(self) -> None:
        missing = [f for f in self.doc["artifacts"].values() if not (self.out / f).exists()]
        if missing:
            raise RuntimeError(f"artifacts missing at exit: {missing}")
        self.timings["total"] = round(time.perf_counter() - self._t0, 3)
        _write_json(self.out / "manifest.json", self.doc)
        _write_json(self.out / "timings.json", self.timings)


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _make_oracle(args, config: attack.ExperimentConfig, seed: int) -> oracle.OracleHandle:
    if args.oracle_addr:
        return oracle.RemoteOracle(args.oracle_addr, config.tier_config())
    if args.model:
        return oracle.LocalOracle(_load_model(args.model), config.tier_config())
    raise ConfigError("need --oracle-addr or --model to label images")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    config = load_config(args.config, args.seed_override)
    out = _out_dir(args.out)
    manifest = Manifest(out, "synth", config)
    t0 = time.perf_counter()
    splits = _splits(config, _seed(config))
    for name in SPLITS:
        save_idx(splits[name], manifest.add(f"{name}_images", f"{name}-images.idx"),
                 manifest.add(f"{name}_labels", f"{name}-labels.idx"))
    manifest.doc["seed"] = _seed(config)
    manifest.time("synth", t0)
    manifest.write()
    return EXIT_OK


def cmd_train_target(args) -> int:
    config = load_config(args.config, args.seed_override)
    out = _out_dir(args.out)
    manifest = Manifest(out, "train-target", config)
    seed = _seed(config)
    t0 = time.perf_counter()
    backbone, target = attack.build_target(config, seed, _splits(config, seed))
    nn.save_model(backbone, manifest.add("backbone", "backbone.ckpt"))
    nn.save_model(target, manifest.add("target", "target.ckpt"))
    manifest.doc["seed"] = seed
    manifest.time("train_target", t0)
    manifest.write()
    return EXIT_OK


def cmd_serve(args) -> int:
    model = _load_model(args.model)
    try:
        tier = oracle.TierConfig(args.tier, args.price, args.free_quota)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    server = oracle.OracleServer(model, args.bind, tier, args.audit_log)
    print(f"listening on {server.address}", flush=True)
    server.serve_forever()
    return EXIT_OK


def _default_images(config: attack.ExperimentConfig, seed: int, source: str) -> np.ndarray:
    splits = _splits(config, seed)
    if source == "PD":
        return splits["pdd"].images
    npd = splits["npdd"].subset(np.arange(config.npd_query_budget))
    return (to_grayscale(npd) if config.grayscale_npd else npd).images


def cmd_steal(args) -> int:
    config = load_config(args.config, args.seed_override)
    out = _out_dir(args.out)
    source = args.source.upper()
    manifest = Manifest(out, "steal", config)
    seed = _seed(config)
    if args.images:
        images = _read_unlabeled(args.images)
    else:
        images = _default_images(config, seed, source)
    t0 = time.perf_counter()
    with _make_oracle(args, config, seed) as handle:
        fake = attack.generate_fake_dataset(handle, images, source, config.problem.n_classes,
                                            config.excluded_labels, config.balance_classes)
    stem = f"fake-{source.lower()}"
    save_idx(fake.dataset, manifest.add("images", f"{stem}-images.idx"),
             manifest.add("labels", f"{stem}-labels.idx"))
    sidecar = {"source": source, "n_queries": fake.n_queries_used, "cost_usd": f"{fake.cost:.2f}",
               "discarded": fake.discarded_count, "excluded_labels": sorted(fake.excluded_labels),
               "n_classes": fake.n_classes, "tier": config.tier,
               "images": f"{stem}-images.idx", "labels": f"{stem}-labels.idx"}
    _write_json(manifest.add("sidecar", f"{stem}.json"), sidecar)
    manifest.time("steal", t0)
    manifest.write()
    return EXIT_OK


def _read_unlabeled(images_path) -> np.ndarray:
    try:
        return load_idx_images(images_path)
    except FileNotFoundError as exc:
        raise ConfigError(f"image file not found: {images_path}") from exc


def cmd_train_copycat(args) -> int:
    config = load_config(args.config, args.seed_override)
    out = _out_dir(args.out)
    manifest = Manifest(out, "train-copycat", config)
    seed = _seed(config)
    seeds = attack.stage_seeds(seed)
    sidecar_path = Path(args.fake)
    if not sidecar_path.is_file():
        raise ConfigError(f"fake dataset sidecar not found: {sidecar_path}")
    sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
    source = sidecar["source"]
    base = sidecar_path.parent
    fake = load_idx(base / sidecar["images"], base / sidecar["labels"], sidecar["n_classes"],
                    Provenance.FAKE_NPD if source == "NPD" else Provenance.FAKE_PD)
    if source == "PD":
        fake = attack.pd_training_set(fake, seeds["augment"], config.augment_pd)

    t0 = time.perf_counter()
    if args.init:
        start = _load_model(args.init)
        sgd = config.stage_sgd(config.copycat_epochs, seeds["npd_pd_train"])
    else:
        arch = config.copycat_arch or nn.default_architecture(config.problem.n_classes)
        generic = synth_generic(config.generic_size, config.problem.image_size, config.problem.channels,
                                seeds["generic"])
        backbone = attack.pretrain_backbone(generic, arch,
                                            config.stage_sgd(config.pretrain_epochs, seeds["pretrain"]))
        head_seed, train_seed = ((seeds["npd_head"], seeds["npd_train"]) if source == "NPD"
                                 else (seeds["pdol_head"], seeds["pd_train"]))
        start = attack.make_copycat(backbone, fake.n_classes, head_seed)
        sgd = config.stage_sgd(config.copycat_epochs, train_seed)
    copy, train_log = attack.train_copycat(start, fake, sgd)
    nn.save_model(copy, manifest.add("copycat", "copycat.ckpt"))
    _write_json(manifest.add("train_log", "train-log.json"),
                {"losses": train_log.losses, "accuracies": train_log.accuracies})
    manifest.time("train_copycat", t0)
    manifest.write()
    return EXIT_OK


def cmd_eval(args) -> int:
    config = load_config(args.config, args.seed_override)
    out = _out_dir(args.out)
    manifest = Manifest(out, "eval", config)
    seed = _seed(config)
    k = config.problem.n_classes
    excluded = sorted(set(config.excluded_labels))
    td = filter_classes(_splits(config, seed)["td"], excluded)
    model = _load_model(args.model)
    preds = nn.predict(model, td.images)
    macro, per_class = macro_accuracy(preds, td.labels, td.n_classes)
    result = {"macro_acc": macro, "per_class_acc": per_class, "n_test": len(td)}

    target_preds = None
    if args.target or args.oracle_addr:
        remap = np.full(k, -1, dtype=np.int64)
        remap[[c for c in range(k) if c not in excluded]] = np.arange(td.n_classes)
        if args.target:
            raw = nn.predict(_load_model(args.target), td.images)
        else:
            with oracle.RemoteOracle(args.oracle_addr, config.tier_config()) as handle:
                raw = handle.query_batch(td.images)
        target_preds = remap[raw]
    if target_preds is not None:
        target_macro, _ = macro_accuracy(target_preds, td.labels, td.n_classes)
        result.update(target_macro_acc=target_macro, agreement=agreement(preds, target_preds),
                      perf_over_target=performance_over(macro, target_macro))
    _write_json(manifest.add("eval", "eval.json"), result)
    manifest.write()
    return EXIT_OK


def cmd_run_matrix(args) -> int:
    config = load_config(args.config, args.seed_override)
    if args.oracle_addr and len(config.seeds) != 1:
        raise ConfigError("--oracle-addr serves one target, so the config needs exactly one seed "
                          "(or pass --seed-override)")
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    out = _out_dir(args.out)
    manifest = Manifest(out, "run-matrix", config)
    t0 = time.perf_counter()
    report = attack.run_matrix(config, oracle_address=args.oracle_addr, jobs=args.jobs)
    (manifest.add("report_json", "report.json")).write_text(report.to_json(), encoding="utf-8")
    (manifest.add("report_csv", "report.csv")).write_text(report.to_csv(), encoding="utf-8")
    (manifest.add("tables", "tables.md")).write_text(report.to_tables_md(), encoding="utf-8")
    manifest.time("run_matrix", t0)
    for seed, stages in report.timings.items():
        for stage, secs in stages.items():
            manifest.timings[f"seed {seed}/{stage}"] = secs
    manifest.write()
    kinds = {e["kind"] for e in report.errors.values()}
    for seed, err in sorted(report.errors.items()):
        print(f"seed {seed} failed in stage {err['stage']}: {err['msg']}", file=sys.stderr)
    if "network" in kinds:
        return EXIT_NETWORK
    if "training" in kinds:
        return EXIT_TRAINING
    return EXIT_OTHER if kinds else EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="copycat", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"copycat {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, oracle_flags=False):
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed-override", type=int, help="run a single seed instead of config.seeds")
        if oracle_flags:
            p.add_argument("--oracle-addr", help="host:port of a running oracle server")
        return p

    p = common(sub.add_parser("synth", help="write ODD/PDD/NPDD/TD as IDX files"))
    p.set_defaults(func=cmd_synth)

    p = common(sub.add_parser("train-target", help="pretrain a backbone and train the target on ODD"))
    p.set_defaults(func=cmd_train_target)

    p = sub.add_parser("serve", help="expose a checkpoint as a label-only oracle over TCP")
    p.add_argument("--model", required=True, help="target checkpoint")
    p.add_argument("--bind", default="127.0.0.1:5555")
    p.add_argument("--tier", default="BASIC", choices=[t.value for t in oracle.Tier])
    p.add_argument("--price", default=str(oracle.DEFAULT_PRICE), help="dollars per query")
    p.add_argument("--free-quota", type=int, default=oracle.DEFAULT_FREE_QUOTA)
    p.add_argument("--audit-log", help="CSV file recording every answered query")
    p.set_defaults(func=cmd_serve)

    p = common(sub.add_parser("steal", help="label images through the oracle into a fake dataset"),
               oracle_flags=True)
    p.add_argument("--source", required=True, choices=["PD", "NPD", "pd", "npd"])
    p.add_argument("--model", help="query this checkpoint in-process instead of a server")
    p.add_argument("--images", help="IDX image file to label (default: the config's split)")
    p.set_defaults(func=cmd_steal)

    p = common(sub.add_parser("train-copycat", help="train a copycat on a stolen-label dataset"))
    p.add_argument("--fake", required=True, help="sidecar JSON written by 'steal'")
    p.add_argument("--init", help="fine-tune this checkpoint instead of a fresh copycat")
    p.set_defaults(func=cmd_train_copycat)

    p = common(sub.add_parser("eval", help="score a checkpoint on TD"), oracle_flags=True)
    p.add_argument("--model", required=True)
    p.add_argument("--target", help="target checkpoint for agreement / performance over target")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("run-matrix", help="all five networks for every seed, plus medians"),
               oracle_flags=True)
    p.add_argument("--jobs", type=int, default=1, help="seeds run in parallel processes")
    p.set_defaults(func=cmd_run_matrix)
    return parser


def _setup_logging() -> None:
    name = os.environ.get("COPYCAT_LOG", "info").lower()
    if name not in LOG_LEVELS:
        raise ConfigError(f"COPYCAT_LOG must be one of {sorted(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(asctime)s %(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except oracle.OracleConnectionError as exc:
        print(f"network error: {exc}", file=sys.stderr)
        return EXIT_NETWORK
    except nn.TrainingDiverged as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (oracle.OracleError, attack.EmptyFakeDatasetError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
