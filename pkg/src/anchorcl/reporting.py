"""Metric records, report files, and progression plots.

A run produces one record per (session, task, metric, head); the same file
feeds the plain-text summary table, the progression plots, and any later
re-rendering. Records are written with a stable field order so identical
runs produce byte-identical files.
"""

from __future__ import annotations

import json
import os
import uuid
from dataclasses import dataclass, field

import numpy as np

RECORD_FIELDS = ("session", "task", "metric", "head", "value", "seed")


class ReportError(RuntimeError):
    pass


@dataclass(frozen=True)
class MetricRecord:
    session: int
    task: int
    metric: str  # "SA" | "RA"
    head: str  # "primary" | "auxiliary" | "ensemble"
    value: float
    seed: int


@dataclass
class StreamReport:
    records: list[MetricRecord] = field(default_factory=list)
    sessions: int = 0
    config_echo: dict = field(default_factory=dict)
    master_seed: int = 0
    wall_clock_sec: float = 0.0
    partial: bool = False
    error: str | None = None

    def heads(self, metric: str) -> list[str]:
        return sorted({r.head for r in self.records if r.metric == metric})

    def metrics(self) -> list[str]:
        return sorted({r.metric for r in self.records})

    def matrix(self, metric: str, head: str) -> dict[tuple[int, int], float]:
        return {(r.session, r.task): r.value for r in self.records
                if r.metric == metric and r.head == head}

    def final_row(self, metric: str, head: str) -> tuple[dict[int, float], float]:
        """Per-task values after the last completed session, plus their
        unweighted mean."""
        cells = self.matrix(metric, head)
        if not cells:
            raise ReportError(f"no records for metric={metric!r} head={head!r}")
        last = max(s for s, _ in cells)
        row = {t: v for (s, t), v in cells.items() if s == last}
        return row, float(np.mean([row[t] for t in sorted(row)]))

    def session_average(self, metric: str, head: str, session: int) -> float:
        cells = self.matrix(metric, head)
        vals = [v for (s, _), v in cells.items() if s == session]
        if not vals:
            raise ReportError(f"no session-{session} records for {metric}/{head}")
        return float(np.mean(vals))


class StreamAborted(RuntimeError):
    """A session failed; `.report` holds the partial results."""

    def __init__(self, report: StreamReport, cause: str):
        super().__init__(f"stream aborted after session {report.sessions}: {cause}")
        self.report = report


def preflight_output_dir(path: str) -> None:
    """Fail before training starts if the output directory is unusable."""
    os.makedirs(path, exist_ok=True)
    probe = os.path.join(path, f".write-probe-{uuid.uuid4().hex}")
    try:
        with open(probe, "w") as fh:
            fh.write("ok")
    except OSError as err:
        raise ReportError(f"output directory {path!r} is not writable: {err}") from err
    finally:
        if os.path.exists(probe):
            os.remove(probe)


def write_records(path: str, report: StreamReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in report.records:
            obj = {"session": r.session, "task": r.task, "metric": r.metric,
                   "head": r.head, "value": r.value, "seed": r.seed}
            fh.write(json.dumps(obj) + "\n")


def read_records(path: str) -> StreamReport:
    records = []
    seed = 0
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            records.append(MetricRecord(
                session=int(obj["session"]), task=int(obj["task"]),
                metric=str(obj["metric"]), head=str(obj["head"]),
                value=float(obj["value"]), seed=int(obj["seed"])))
            seed = int(obj["seed"])
    if not records:
        raise ReportError(f"no records in {path}")
    sessions = max(r.session for r in records)
    return StreamReport(records=records, sessions=sessions, master_seed=seed)


def _final_table(report: StreamReport) -> str:
    tasks = sorted({r.task for r in report.records})
    lines = []
    header = f"{'metric':<7}{'head':<11}" + "".join(f"{f'T{t}':>8}" for t in tasks) + f"{'Average':>9}"
    lines.append(header)
    lines.append("-" * len(header))
    for metric in report.metrics():
        for head in report.heads(metric):
            row, avg = report.final_row(metric, head)
            cells = "".join(f"{row[t]:>8.2f}" if t in row else f"{'-':>8}" for t in tasks)
            lines.append(f"{metric:<7}{head:<11}{cells}{avg:>9.2f}")
    return "\n".join(lines)


def _progression_table(report: StreamReport, metric: str, head: str) -> str:
    cells = report.matrix(metric, head)
    sessions = sorted({s for s, _ in cells})
    tasks = sorted({t for _, t in cells})
    lines = [f"{metric} {head} progression (row: after session i)"]
    header = f"{'':<10}" + "".join(f"{f'T{t}':>8}" for t in tasks) + f"{'Avg':>8}"
    lines.append(header)
    for s in sessions:
        row = {t: v for (si, t), v in cells.items() if si == s}
        body = "".join(f"{row[t]:>8.2f}" if t in row else f"{'-':>8}" for t in tasks)
        avg = float(np.mean([row[t] for t in sorted(row)]))
        lines.append(f"{f'session {s}':<10}{body}{avg:>8.2f}")
    return "\n".join(lines)


def write_summary(path: str, report: StreamReport) -> None:
    parts = []
    status = "PARTIAL" if report.partial else "complete"
    parts.append(f"run status: {status}")
    if report.error:
        parts.append(f"error: {report.error}")
    parts.append(f"master seed: {report.master_seed}")
    parts.append(f"sessions completed: {report.sessions}")
    parts.append(f"wall clock: {report.wall_clock_sec:.1f}s")
    parts.append("")
    parts.append("final per-task performance (%)")
    parts.append(_final_table(report))
    for metric in report.metrics():
        for head in report.heads(metric):
            parts.append("")
            parts.append(_progression_table(report, metric, head))
    if report.config_echo:
        parts.append("")
        parts.append("config echo:")
        parts.append(json.dumps(report.config_echo, indent=2, sort_keys=True))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")


def write_plots(directory: str, report: StreamReport) -> list[str]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    os.makedirs(directory, exist_ok=True)
    written = []
    for metric in report.metrics():
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for head in report.heads(metric):
            cells = report.matrix(metric, head)
            sessions = sorted({s for s, _ in cells})
            avgs = [report.session_average(metric, head, s) for s in sessions]
            ax.plot(sessions, avgs, marker="o", label=head)
        ax.set_xlabel("session")
        ax.set_ylabel(f"average {metric} over seen tasks (%)")
        ax.set_title(f"{metric} progression")
        ax.grid(alpha=0.3)
        ax.legend()
        fig.tight_layout()
        out = os.path.join(directory, f"progression_{metric.lower()}.png")
        fig.savefig(out, dpi=120)
        plt.close(fig)
        written.append(out)
    return written


def emit_report(report: StreamReport, output_dir: str) -> list[str]:
    """Write records, summary, config echo, and plots; returns the paths."""
    os.makedirs(output_dir, exist_ok=True)
    paths = []
    records_path = os.path.join(output_dir, "records.jsonl")
    write_records(records_path, report)
    paths.append(records_path)
    summary_path = os.path.join(output_dir, "summary.txt")
    write_summary(summary_path, report)
    paths.append(summary_path)
    if report.config_echo:
        echo_path = os.path.join(output_dir, "config_echo.json")
        with open(echo_path, "w", encoding="utf-8") as fh:
            json.dump(report.config_echo, fh, indent=2, sort_keys=True)
            fh.write("\n")
        paths.append(echo_path)
    paths.extend(write_plots(os.path.join(output_dir, "plots"), report))
    return paths
