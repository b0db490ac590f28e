"""Macro accuracy, performance ratios, agreement, and report rendering."""
from __future__ import annotations

import csv
import enum
import io
import json
import statistics
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal

import numpy as np


class Network(str, enum.Enum):
    OD = "OD"
    PD_OL = "PD_OL"
    NPD_SL = "NPD_SL"
    PD_SL = "PD_SL"
    NPD_PD_SL = "NPD_PD_SL"


NETWORK_ORDER = list(Network)
DISPLAY_NAME = {Network.OD: "OD (Target)", Network.PD_OL: "PD-OL", Network.NPD_SL: "NPD-SL",
                Network.PD_SL: "PD-SL", Network.NPD_PD_SL: "NPD+PD-SL"}


class UndefinedClassError(ValueError):
    pass


def macro_accuracy(preds, labels, n_classes: int) -> tuple[float, list[float]]:
    """Unweighted mean of per-class accuracies."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ValueError(f"{len(preds)} predictions for {len(labels)} labels")
    totals = np.bincount(labels, minlength=n_classes)[:n_classes]
    missing = [k for k in range(n_classes) if totals[k] == 0]
    if missing:
        raise UndefinedClassError(f"classes {missing} have no samples; per-class accuracy undefined")
    correct = np.bincount(labels[preds == labels], minlength=n_classes)[:n_classes]
    per_class = [float(c) / float(t) for c, t in zip(correct, totals)]
    return float(sum(per_class) / n_classes), per_class


def performance_over(acc_a: float, acc_b: float) -> float:
    """Ratio acc_a / acc_b (format with :func:`percent` for reports)."""
    if acc_b <= 0:
        raise ZeroDivisionError("reference accuracy must be positive")
    return acc_a / acc_b


def agreement(preds_a, preds_b) -> float:
    a = np.asarray(preds_a)
    b = np.asarray(preds_b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"prediction vectors differ in shape: {a.shape} vs {b.shape}")
    if len(a) == 0:
        raise ValueError("agreement needs at least one prediction")
    return float(np.count_nonzero(a == b)) / len(a)


def percent(ratio: float) -> str:
    """'98.6' style: ratio as a percentage, one decimal, round-half-even."""
    return str(Decimal(repr(ratio * 100)).quantize(Decimal("0.1"), rounding=ROUND_HALF_EVEN))


# ---------------------------------------------------------------------------
# report


@dataclass
class MetricsRow:
    seed: int | str
    network: Network
    macro_acc: float | None = None
    per_class_acc: list[float] = field(default_factory=list)
    perf_over_target: float | None = None
    perf_over_pdol: float | None = None
    agreement: float | None = None
    n_queries: int = 0
    cost_usd: Decimal = Decimal("0.00")
    status: str = "ok"  # ok | skipped | failed

    def __post_init__(self):
        self.network = Network(self.network)
        if self.macro_acc is not None and self.per_class_acc:
            if abs(self.macro_acc - float(np.mean(self.per_class_acc))) > 1e-12:
                raise ValueError("macro_acc must equal the mean of per_class_acc")


CSV_HEADER = ["seed", "network", "macro_acc", "perf_over_target", "perf_over_pdol",
              "agreement", "n_queries", "cost_usd"]


def _fmt_fraction(v) -> str:
    return "" if v is None else f"{v:.6f}"


def _fmt_ratio(v) -> str:
    return "" if v is None else percent(v)


@dataclass
class ExperimentReport:
    rows: list[MetricsRow] = field(default_factory=list)
    notes: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)  # seed -> {stage, kind, msg}
    timings: dict = field(default_factory=dict)  # wall-clock; kept out of to_json/to_csv

    @property
    def seeds(self) -> list:
        out = []
        for r in self.rows:
            if r.seed not in out:
                out.append(r.seed)
        return out

    def row(self, seed, network) -> MetricsRow:
        for r in self.rows:
            if r.seed == seed and r.network == Network(network):
                return r
        raise KeyError((seed, network))

    def metric(self, network, name: str) -> list[float]:
        return [getattr(r, name) for r in self.rows
                if r.network == Network(network) and r.status == "ok" and getattr(r, name) is not None]

    def median(self, network, name: str) -> float | None:
        values = self.metric(network, name)
        return statistics.median(values) if values else None

    def aggregate(self) -> list[MetricsRow]:
        out = []
        for net in NETWORK_ORDER:
            ok = [r for r in self.rows if r.network == net and r.status == "ok"]
            if not ok:
                out.append(MetricsRow("median", net, status="skipped"))
                continue
            med = lambda name: (statistics.median([getattr(r, name) for r in ok])  # noqa: E731
                                if all(getattr(r, name) is not None for r in ok) else None)
            out.append(MetricsRow(
                "median", net, macro_acc=med("macro_acc"), perf_over_target=med("perf_over_target"),
                perf_over_pdol=med("perf_over_pdol"), agreement=med("agreement"),
                n_queries=int(statistics.median([r.n_queries for r in ok])),
                cost_usd=Decimal(statistics.median([r.cost_usd for r in ok])).quantize(Decimal("0.01"))))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in self.rows + self.aggregate():
            if r.status != "ok":
                writer.writerow([r.seed, r.network.value, r.status, "", "", "", r.n_queries, f"{r.cost_usd:.2f}"])
                continue
            writer.writerow([r.seed, r.network.value, _fmt_fraction(r.macro_acc),
                             _fmt_ratio(r.perf_over_target), _fmt_ratio(r.perf_over_pdol),
                             _fmt_fraction(r.agreement), r.n_queries, f"{r.cost_usd:.2f}"])
        return buf.getvalue()

    def to_json(self) -> str:
        def encode(r: MetricsRow) -> dict:
            d = asdict(r)
            d["network"] = r.network.value
            d["cost_usd"] = f"{r.cost_usd:.2f}"
            return d
        doc = {"rows": [encode(r) for r in self.rows],
               "median": [encode(r) for r in self.aggregate()],
               "errors": {str(k): v for k, v in self.errors.items()},
               "notes": self.notes}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def to_tables_md(self) -> str:
        """Macro accuracy / performance-over-target / performance-over-PD-OL tables."""
        lines = []
        blocks = [(s, [r for r in self.rows if r.seed == s]) for s in self.seeds]
        blocks.append(("median", self.aggregate()))
        for seed, rows in blocks:
            lines += [f"### seed {seed}", "",
                      "| Networks | Macro Average (accuracy) | Performance over target network "
                      "| Performance over PD-OL network |",
                      "|---|---|---|---|"]
            for r in rows:
                if r.status != "ok":
                    lines.append(f"| {DISPLAY_NAME[r.network]} | {r.status} | | |")
                    continue
                over_t = "_" if r.network == Network.OD else f"{percent(r.perf_over_target)}%"
                over_p = "_" if r.perf_over_pdol is None else f"{percent(r.perf_over_pdol)}%"
                lines.append(f"| {DISPLAY_NAME[r.network]} | {percent(r.macro_acc)}% | {over_t} | {over_p} |")
            lines.append("")
        return "\n".join(lines)
