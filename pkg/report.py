"""Curves and summary tables from run metric CSVs."""

import csv
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import MetricError, MetricRecord, read_metric_rows  # noqa: E402

logger = logging.getLogger(__name__)

PLOTTED_METRICS = ("afr", "mape", "asir")
METRICS_FILE = "metrics.csv"
SUMMARY_NAME = "summary.csv"
SUMMARY_HEADER = (
    "run",
    "row",
    "nids_kind",
    "mu",
    "embedding_mode",
    "epoch",
    "afr",
    "asr",
    "asir",
    "mape",
    "asr_original",
)
_LABELS = {"afr": "AFR (%)", "mape": "MAPE (%)", "asir": "ASIR (%)"}


class ReportError(RuntimeError):
    pass


@dataclass
class Report:
    summary: Path
    plots: list = field(default_factory=list)
    # file name -> curve label -> (epochs, values)
    series: dict = field(default_factory=dict)


def _load_run(run_dir: Path) -> list[MetricRecord]:
    path = run_dir / METRICS_FILE if run_dir.is_dir() else run_dir
    if not path.exists():
        raise ReportError(f"no {METRICS_FILE} under {run_dir}")
    try:
        records = read_metric_rows(path)
    except MetricError as e:
        raise ReportError(str(e)) from e
    if not records:
        raise ReportError(f"{path} holds no metric rows")
    return records


def _run_name(path: Path) -> str:
    return path.name if path.is_dir() else path.parent.name


def _plot(path: Path, metric: str, curves: dict, title: str) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    try:
        for label, (epochs, values) in curves.items():
            ax.plot(epochs, values, marker="o", markersize=3, label=label)
        ax.set_xlabel("Epoch")
        ax.set_ylabel(_LABELS[metric])
        ax.set_title(title)
        ax.grid(True, alpha=0.3)
        if len(curves) > 1:
            ax.legend()
        fig.tight_layout()
        fig.savefig(path, dpi=100)
    finally:
        plt.close(fig)


def _summary_rows(run_name: str, records: list[MetricRecord]) -> list[dict]:
    rows = []
    by_kind = defaultdict(list)
    for record in records:
        by_kind[record.nids_kind].append(record)
    for kind in sorted(by_kind):
        ordered = sorted(by_kind[kind], key=lambda r: r.epoch)
        final = ordered[-1]
        best = min(ordered, key=lambda r: (r.afr, r.epoch))
        for tag, record in (("final", final), ("best", best)):
            rows.append(
                {
                    "run": run_name,
                    "row": tag,
                    **record.as_row(),
                    "asr_original": record.asr - record.asir,
                }
            )
    return rows


def build_report(run_dirs: Sequence[str | Path], out_dir: str | Path | None = None) -> Report:
    """Per-run curves, sweep overlays across mu, and a final/best summary table.

    Output depends only on the CSV contents and the order of ``run_dirs``.
    """
    if not run_dirs:
        raise ReportError("report needs at least one run directory")
    runs = [(Path(d), _load_run(Path(d))) for d in run_dirs]
    target = Path(out_dir) if out_dir is not None else runs[0][0]
    target.mkdir(parents=True, exist_ok=True)
    report = Report(summary=target / SUMMARY_NAME)

    # (nids, mode) -> curve label -> (mu, metric -> (epochs, values))
    sweeps = defaultdict(dict)
    seen = set()
    summary = []
    for run_dir, records in runs:
        summary.extend(_summary_rows(run_dir.name, records))
        run_name = _run_name(run_dir)
        groups = defaultdict(list)
        for record in records:
            groups[(record.nids_kind, record.mu, record.embedding_mode)].append(record)
        for (kind, mu, mode), group in sorted(groups.items()):
            group.sort(key=lambda r: r.epoch)
            epochs = [r.epoch for r in group]
            label, suffix = f"mu={mu}", ""
            if (kind, mu, mode) in seen:
                logger.warning(
                    "%s repeats nids=%s mu=%s mode=%s of an earlier run; keying its curves by run name",
                    run_name, kind, mu, mode,
                )
                label, suffix = f"mu={mu} ({run_name})", f"_{run_name}"
            seen.add((kind, mu, mode))
            series = sweeps[(kind, mode)].setdefault(label, (mu, {}))[1]
            for metric in PLOTTED_METRICS:
                values = [getattr(r, metric) for r in group]
                name = f"{metric}_{kind}_{mu}_{mode}{suffix}.png"
                curves = {label: (epochs, values)}
                _plot(target / name, metric, curves, f"{metric.upper()} vs epoch ({kind}, mu={mu}, {mode})")
                report.plots.append(target / name)
                report.series[name] = curves
                series[metric] = (epochs, values)

    for (kind, mode), by_label in sorted(sweeps.items()):
        if len(by_label) < 2:
            continue
        ordered = sorted(by_label.items(), key=lambda item: item[1][0])
        for metric in PLOTTED_METRICS:
            name = f"{metric}_{kind}_sweep_{mode}.png"
            curves = {label: series[metric] for label, (_, series) in ordered}
            _plot(target / name, metric, curves, f"{metric.upper()} vs epoch ({kind}, {mode})")
            report.plots.append(target / name)
            report.series[name] = curves

    with report.summary.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=SUMMARY_HEADER, lineterminator="\n")
        writer.writeheader()
        for row in summary:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    logger.info("Report: %d plots, summary %s", len(report.plots), report.summary)
    return report
