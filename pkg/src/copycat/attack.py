"""Copycat attack: stolen-label fake datasets, copycat training, experiment matrix.

Per seed the matrix builds five networks and scores them on TD:

    OD          target, trained on ODD with original labels
    PD_OL       trained on augmented PDD with original labels
    NPD_SL      copycat trained on NPD images labelled by the oracle
    PD_SL       copycat trained on augmented PDD labelled by the oracle
    NPD_PD_SL   NPD_SL fine-tuned further on the PD_SL dataset

Only the target ever sees ODD.  Copycats see PDD/NPDD images plus whatever
labels the oracle returns.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from decimal import Decimal

import numpy as np

from . import augment, nn
from .data import (LabeledDataset, Provenance, SynthProblemConfig, filter_classes, style_from_dict,
                   synth_generic, synth_problem, to_grayscale)
from .eval import ExperimentReport, MetricsRow, Network, agreement, macro_accuracy, performance_over
from .oracle import LocalOracle, OracleError, OracleHandle, RemoteOracle, TierConfig, estimate_cost

log = logging.getLogger(__name__)


class EmptyFakeDatasetError(ValueError):
    pass


class StageError(RuntimeError):
    """Wraps a failure with the seed and pipeline stage it happened in."""

    def __init__(self, seed, stage: str, cause: BaseException):
        super().__init__(f"seed {seed}, stage {stage}: {type(cause).__name__}: {cause}")
        self.seed, self.stage, self.cause = seed, stage, cause

    @property
    def kind(self) -> str:
        if isinstance(self.cause, nn.TrainingDiverged):
            return "training"
        if isinstance(self.cause, (OracleError, ConnectionError)):
            return "network"
        return "other"


# ---------------------------------------------------------------------------
# fake datasets


@dataclass(frozen=True, eq=False)
class FakeDataset:
    dataset: LabeledDataset
    source: str  # "NPD" | "PD"
    n_queries_used: int
    cost: Decimal
    excluded_labels: frozenset
    discarded_count: int
    oracle_labels: np.ndarray  # retained samples' labels before renumbering

    def __post_init__(self):
        if self.n_queries_used != len(self.dataset) + self.discarded_count:
            raise ValueError("n_queries_used must equal retained + discarded samples")
        if np.isin(self.oracle_labels, list(self.excluded_labels)).any():
            raise ValueError("fake dataset retains an excluded label")

    def __len__(self) -> int:
        return len(self.dataset)

    @property
    def images(self):
        return self.dataset.images

    @property
    def labels(self):
        return self.dataset.labels

    @property
    def n_classes(self) -> int:
        return self.dataset.n_classes


def _balance(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Indices keeping the first m samples of each predicted class, m = smallest non-zero count."""
    counts = np.bincount(labels, minlength=n_classes)
    present = counts[counts > 0]
    if present.size == 0:
        return np.empty(0, dtype=np.int64)
    m = int(present.min())
    keep = []
    for k in range(n_classes):
        keep.extend(np.flatnonzero(labels == k)[:m])
    return np.sort(np.asarray(keep, dtype=np.int64))


def generate_fake_dataset(oracle: OracleHandle, images, source: str, n_classes: int,
                          excluded_labels=(), balance_classes: bool = False,
                          batch_size: int = 1024) -> FakeDataset:
    """Label ``images`` through the oracle; drop excluded classes and renumber.

    ``n_classes`` is the target's output count, which the attacker needs to
    size the copycat head anyway.  Any original labels on ``images`` are
    ignored.
    """
    if isinstance(images, LabeledDataset):
        images = images.images
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise ValueError("no images to label")
    source = source.upper()
    if source not in ("NPD", "PD"):
        raise ValueError("source must be 'NPD' or 'PD'")
    excluded = frozenset(int(c) for c in excluded_labels)

    stolen = np.concatenate([oracle.query_batch(images[i:i + batch_size])
                             for i in range(0, len(images), batch_size)])
    n_queries = len(stolen)
    if stolen.min() < 0 or stolen.max() >= n_classes:
        raise ValueError(f"oracle returned labels outside [0, {n_classes})")

    keep = np.flatnonzero(~np.isin(stolen, list(excluded)))
    if keep.size == 0:
        raise EmptyFakeDatasetError(f"all {n_queries} stolen labels fall in the excluded set {sorted(excluded)}")
    labelled = LabeledDataset(images[keep], stolen[keep], n_classes,
                              Provenance.FAKE_NPD if source == "NPD" else Provenance.FAKE_PD)
    labelled = filter_classes(labelled, excluded)
    oracle_labels = stolen[keep]
    if balance_classes:
        idx = _balance(labelled.labels, labelled.n_classes)
        labelled = labelled.subset(idx)
        oracle_labels = oracle_labels[idx]
        if len(labelled) == 0:
            raise EmptyFakeDatasetError("class balancing discarded every sample")
    cost = estimate_cost(n_queries, oracle.tier, oracle.meter.config.price_per_query, oracle.free_quota)
    return FakeDataset(labelled, source, n_queries, cost, excluded, n_queries - len(labelled), oracle_labels)


# ---------------------------------------------------------------------------
# copycat construction and training


def make_copycat(pretrained_backbone: nn.Model, n_classes: int, seed: int) -> nn.Model:
    """Backbone copied verbatim; fresh Glorot head with ``n_classes`` outputs."""
    if n_classes < 2:
        raise ValueError("a copycat needs at least two classes")
    return nn.replace_head(pretrained_backbone, n_classes, seed)


def pretrain_backbone(generic_dataset: LabeledDataset, arch, sgd: nn.SgdConfig) -> nn.Model:
    """Train ``arch`` (head resized to the generic task) from scratch."""
    layers = list(arch[:-1]) + [nn.Dense(generic_dataset.n_classes)]
    model = nn.build_model(layers, generic_dataset.image_shape, seed=sgd.seed)
    nn.train(model, generic_dataset, sgd)
    return model


def train_copycat(copycat: nn.Model, fake, sgd: nn.SgdConfig) -> tuple[nn.Model, nn.TrainLog]:
    """Fine-tune every layer on ``fake``; returns a trained copy."""
    dataset = fake.dataset if isinstance(fake, FakeDataset) else fake
    if dataset.n_classes != copycat.n_classes:
        raise ValueError(f"fake dataset has {dataset.n_classes} classes, copycat has {copycat.n_classes}")
    model = copycat.copy()
    return model, nn.train(model, dataset, sgd, trainable="all")


# ---------------------------------------------------------------------------
# experiment configuration


@dataclass
class ExperimentConfig:
    problem: SynthProblemConfig = field(default_factory=SynthProblemConfig)
    target_epochs: int = 10
    copycat_epochs: int = 5
    sgd: nn.SgdConfig = field(default_factory=nn.SgdConfig)
    npd_query_budget: int = 20_000
    balance_classes: bool = False
    grayscale_npd: bool = True
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    generic_size: int = 1200
    pretrain_epochs: int = 4
    augment_pd: bool = True
    excluded_labels: list[int] = field(default_factory=list)
    copycat_arch: list | None = None
    restart_schedule: bool = True
    tier: str = "BASIC"
    price_per_query: str = "0.0001"
    free_quota: int = 30_000

    def __post_init__(self):
        if isinstance(self.problem, dict):
            problem = dict(self.problem)
            if "shift" in problem:
                problem["shift"] = style_from_dict(problem["shift"])
            self.problem = SynthProblemConfig(**problem)
        if isinstance(self.sgd, dict):
            self.sgd = nn.SgdConfig(**self.sgd)
        if self.copycat_arch is not None:
            self.copycat_arch = [l if not isinstance(l, dict) else nn.layer_from_dict(l)
                                 for l in self.copycat_arch]
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.target_epochs < 1 or self.copycat_epochs < 1 or self.pretrain_epochs < 1:
            raise ValueError("epoch counts must be >= 1")
        if self.npd_query_budget < 0:
            raise ValueError("npd_query_budget must be >= 0")
        if self.npd_query_budget > self.problem.npdd_size:
            raise ValueError(f"npd_query_budget {self.npd_query_budget} exceeds npdd_size "
                             f"{self.problem.npdd_size}")
        if self.problem.channels == 1 and not self.grayscale_npd and self.npd_query_budget:
            raise ValueError("NPD images are RGB; grayscale_npd must be true for a single-channel problem")
        if any(not 0 <= c < self.problem.n_classes for c in self.excluded_labels):
            raise ValueError("excluded_labels must be valid class indices")
        TierConfig(self.tier, self.price_per_query, self.free_quota)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["problem"]["image_size"] = list(self.problem.image_size)
        if self.copycat_arch is not None:
            d["copycat_arch"] = [nn.layer_to_dict(l) for l in self.copycat_arch]
        return json.loads(json.dumps(d))

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def tier_config(self) -> TierConfig:
        return TierConfig(self.tier, self.price_per_query, self.free_quota)

    def stage_sgd(self, epochs: int, seed: int) -> nn.SgdConfig:
        return replace(self.sgd, max_epochs=epochs, seed=seed)


_STAGES = ("problem", "generic", "pretrain", "target_head", "target_train", "augment",
           "pdol_head", "pd_train", "npd_head", "npd_train", "npd_pd_train")


def stage_seeds(seed: int) -> dict[str, int]:
    states = np.random.SeedSequence([int(seed), 0xC0C0]).generate_state(len(_STAGES), dtype=np.uint64)
    return {name: int(s) for name, s in zip(_STAGES, states)}


# ---------------------------------------------------------------------------
# one seed of the matrix


@dataclass
class SeedArtifacts:
    """Everything one seed produced; the CLI persists parts of it."""
    seed: int
    rows: list[MetricsRow]
    target: nn.Model | None = None
    networks: dict = field(default_factory=dict)
    fakes: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)


def build_target(config: ExperimentConfig, seed: int, splits=None, backbone=None):
    """Pretrained backbone and the trained target for ``seed``."""
    seeds = stage_seeds(seed)
    splits = splits or synth_problem(replace(config.problem, seed=seeds["problem"]))
    arch = nn.default_architecture(config.problem.n_classes)
    if backbone is None:
        generic = synth_generic(config.generic_size, config.problem.image_size, config.problem.channels,
                                seeds["generic"])
        backbone = pretrain_backbone(generic, arch, config.stage_sgd(config.pretrain_epochs, seeds["pretrain"]))
    target = make_copycat(backbone, config.problem.n_classes, seeds["target_head"])
    nn.train(target, splits["odd"], config.stage_sgd(config.target_epochs, seeds["target_train"]))
    return backbone, target


def pd_training_set(pd: LabeledDataset, seed: int, augment_pd: bool) -> LabeledDataset:
    """PD-OL and PD-SL both go through here, so their images match bit for bit."""
    return augment.augment_dataset(pd, seed) if augment_pd else pd


def run_seed(config: ExperimentConfig, seed: int, oracle_address: str | None = None) -> SeedArtifacts:
    seeds = stage_seeds(seed)
    k = config.problem.n_classes
    excluded = sorted(set(config.excluded_labels))
    timings: dict[str, float] = {}
    stage = "setup"

    def mark(name, t0):
        timings[name] = round(time.perf_counter() - t0, 3)
        log.info("seed %s: %s done in %.1fs", seed, name, timings[name])

    try:
        t0 = time.perf_counter()
        stage = "synth"
        splits = synth_problem(replace(config.problem, seed=seeds["problem"]))
        generic = synth_generic(config.generic_size, config.problem.image_size, config.problem.channels,
                                seeds["generic"])
        mark(stage, t0)

        t0, stage = time.perf_counter(), "pretrain"
        arch = nn.default_architecture(k)
        backbone = pretrain_backbone(generic, arch, config.stage_sgd(config.pretrain_epochs, seeds["pretrain"]))
        copycat_backbone = backbone
        if config.copycat_arch is not None:
            copycat_backbone = pretrain_backbone(generic, config.copycat_arch,
                                                 config.stage_sgd(config.pretrain_epochs, seeds["pretrain"]))
        mark(stage, t0)

        td = splits["td"]
        eval_td = filter_classes(td, excluded)
        kc = eval_td.n_classes
        remap = np.full(k, -1, dtype=np.int64)
        remap[[c for c in range(k) if c not in excluded]] = np.arange(kc)

        target = None
        if oracle_address is None:
            t0, stage = time.perf_counter(), "target"
            _, target = build_target(config, seed, splits, backbone)
            oracle: OracleHandle = LocalOracle(target, config.tier_config())
            target_preds = remap[nn.predict(target, eval_td.images)]
            mark(stage, t0)
        else:
            stage = "connect"
            oracle = RemoteOracle(oracle_address, config.tier_config())
            # scoring the target is the experimenter's job, so it uses its own handle
            with RemoteOracle(oracle_address, config.tier_config()) as scorer:
                target_preds = remap[scorer.query_batch(eval_td.images)]

        def score(preds) -> tuple[float, list[float]]:
            return macro_accuracy(preds, eval_td.labels, kc)

        od_macro, od_per_class = score(target_preds)
        rows = [MetricsRow(seed, Network.OD, od_macro, od_per_class, performance_over(od_macro, od_macro),
                           None, 1.0)]
        networks = {Network.OD: target}
        fakes = {}

        def evaluate(net, model, fake_queries=0, cost=Decimal("0.00"), pdol_macro=None):
            preds = nn.predict(model, eval_td.images)
            macro, per_class = score(preds)
            row = MetricsRow(seed, net, macro, per_class, performance_over(macro, od_macro),
                             None if pdol_macro is None else performance_over(macro, pdol_macro),
                             agreement(preds, target_preds), fake_queries, cost)
            rows.append(row)
            networks[net] = model
            return row

        # PD-OL: same PDD images with their true labels, restricted to the copied classes
        t0, stage = time.perf_counter(), "pd_ol"
        pd_ol_data = pd_training_set(filter_classes(splits["pdd"], excluded), seeds["augment"], config.augment_pd)
        pd_ol, _ = train_copycat(make_copycat(copycat_backbone, kc, seeds["pdol_head"]), pd_ol_data,
                                 config.stage_sgd(config.copycat_epochs, seeds["pd_train"]))
        pdol_macro = evaluate(Network.PD_OL, pd_ol).macro_acc
        mark(stage, t0)

        # PD-SL: query raw PDD images, then push stolen labels through the same augmentation
        t0, stage = time.perf_counter(), "pd_sl"
        fake_pd = generate_fake_dataset(oracle, splits["pdd"].images, "PD", k, excluded, config.balance_classes)
        fakes["PD"] = fake_pd
        pd_sl_data = pd_training_set(fake_pd.dataset, seeds["augment"], config.augment_pd)
        pd_sl, _ = train_copycat(make_copycat(copycat_backbone, kc, seeds["pdol_head"]), pd_sl_data,
                                 config.stage_sgd(config.copycat_epochs, seeds["pd_train"]))
        mark(stage, t0)

        if config.npd_query_budget > 0:
            t0, stage = time.perf_counter(), "npd_sl"
            npd = splits["npdd"].subset(np.arange(config.npd_query_budget))
            if config.grayscale_npd:
                npd = to_grayscale(npd)
            fake_npd = generate_fake_dataset(oracle, npd.images, "NPD", k, excluded, config.balance_classes)
            fakes["NPD"] = fake_npd
            npd_sl, _ = train_copycat(make_copycat(copycat_backbone, kc, seeds["npd_head"]), fake_npd,
                                      config.stage_sgd(config.copycat_epochs, seeds["npd_train"]))
            evaluate(Network.NPD_SL, npd_sl, fake_npd.n_queries_used, fake_npd.cost, pdol_macro)
            mark(stage, t0)
        else:
            rows.append(MetricsRow(seed, Network.NPD_SL, status="skipped"))

        evaluate(Network.PD_SL, pd_sl, fake_pd.n_queries_used, fake_pd.cost, pdol_macro)

        if config.npd_query_budget > 0:
            t0, stage = time.perf_counter(), "npd_pd_sl"
            finetune_sgd = config.stage_sgd(config.copycat_epochs, seeds["npd_pd_train"])
            if not config.restart_schedule:
                # continue from the NPD-SL run's last learning rate
                last = nn.lr_at(config.stage_sgd(config.copycat_epochs, 0), config.copycat_epochs - 1)
                finetune_sgd = replace(finetune_sgd, base_lr=last)
            both, _ = train_copycat(npd_sl, pd_sl_data, finetune_sgd)
            n_q = fake_npd.n_queries_used + fake_pd.n_queries_used
            evaluate(Network.NPD_PD_SL, both, n_q,
                     estimate_cost(n_q, oracle.tier, oracle.meter.config.price_per_query, oracle.free_quota),
                     pdol_macro)
            mark(stage, t0)
        else:
            rows.append(MetricsRow(seed, Network.NPD_PD_SL, status="skipped"))
        oracle.close()
    except Exception as exc:  # noqa: BLE001 - recorded per seed, other seeds continue
        raise StageError(seed, stage, exc) from exc

    order = {net: i for i, net in enumerate(Network)}
    rows.sort(key=lambda r: order[r.network])
    return SeedArtifacts(seed, rows, target, networks, fakes, timings)


def _failed_rows(seed) -> list[MetricsRow]:
    return [MetricsRow(seed, net, status="failed") for net in Network]


def _run_seed_summary(config_dict: dict, seed: int, oracle_address):
    """Process-pool entry point: returns picklable rows and timings only."""
    config = ExperimentConfig.from_dict(config_dict)
    try:
        art = run_seed(config, seed, oracle_address)
        return seed, art.rows, art.timings, None
    except StageError as err:
        return seed, _failed_rows(seed), {}, {"stage": err.stage, "kind": err.kind, "msg": str(err)}


def run_matrix(config: ExperimentConfig, oracle_address: str | None = None, jobs: int = 1,
               keep=None) -> ExperimentReport:
    """Five networks per seed plus medians.

    A failing seed contributes rows marked ``failed`` and an entry in
    ``report.errors``; the remaining seeds still run.  ``keep`` (seed ->
    SeedArtifacts) collects full artifacts in sequential mode.
    """
    report = ExperimentReport(notes={
        "config_sha256": config.digest(),
        "augmentation_registry_sha256": augment.DEFAULT_REGISTRY_SHA256,
        "pixel_scaling": "[0,1] by v/255; no mean subtraction",
        "augmentation_keeps_originals": True,
    })
    if jobs > 1 and keep is None:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_seed_summary, [config.to_dict()] * len(config.seeds),
                                    config.seeds, [oracle_address] * len(config.seeds)))
    else:
        results = []
        for seed in config.seeds:
            try:
                art = run_seed(config, seed, oracle_address)
                if keep is not None:
                    keep[seed] = art
                results.append((seed, art.rows, art.timings, None))
            except StageError as err:
                log.error("%s", err)
                results.append((seed, _failed_rows(seed), {}, {"stage": err.stage, "kind": err.kind,
                                                               "msg": str(err)}))
    for seed, rows, timings, error in results:
        report.rows.extend(rows)
        report.timings[str(seed)] = timings
        if error is not None:
            report.errors[seed] = error
    return report
