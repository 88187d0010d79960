"""Score collection over an edits directory and report assembly (JSON, text tables, plots)."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .benchmark import EDIT_TYPES, EditTaskRecord
from .io import read_frames
from .metrics import (EmbeddingBackend, PairedComparison, m_dir, m_geo, m_sim, metric_classification_accuracy,
                      metric_human_spearman, reason_breakdown)

OVERALL = "all"
METRICS = ("m_sim", "m_dir", "m_geo")


@dataclass
class ScoreRow:
    """One method's scores on one task, or (task_id None) a pre-aggregated value."""

    method: str
    edit_type: str
    task_id: str | None = None
    m_sim: float | None = None
    m_dir: float | None = None
    m_geo: float | None = None

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScoreRow":
        known = {"method", "edit_type", "task_id", "m_sim", "m_dir", "m_geo"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown score field(s) {sorted(extra)}")
        return cls(**d)


def load_scores(path: str | Path) -> list[ScoreRow]:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    rows.append(ScoreRow.from_dict(json.loads(line)))
                except (ValueError, TypeError) as exc:
                    raise ValueError(f"scores line {lineno}: {exc}") from None
    return rows


def write_scores(path: str | Path, rows: Iterable[ScoreRow]) -> None:
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")


def paper_scores_path() -> Path:
    return Path(__file__).parent / "data" / "paper_scores.jsonl"


def score_edits(records: Sequence[EditTaskRecord], manifest_dir: str | Path, edits_dir: str | Path,
                backend: EmbeddingBackend) -> tuple[list[ScoreRow], list[tuple[str, str]]]:
    """Score every ``edits_dir/<method>/<task id>`` clip against its manifest source.

    Returns the rows and the (method, task id) pairs with no edit on disk.
    """
    manifest_dir, edits_dir = Path(manifest_dir), Path(edits_dir)
    methods = sorted(p.name for p in edits_dir.iterdir() if p.is_dir())
    rows, missing = [], []
    sources: dict[str, np.ndarray] = {}
    for method in methods:
        for rec in records:
            edit_path = edits_dir / method / rec.id
            if not (edit_path / "meta.json").exists():
                missing.append((method, rec.id))
                continue
            if rec.video not in sources:
                sources[rec.video] = read_frames(manifest_dir / rec.video)[0]
            src = sources[rec.video]
            edit = read_frames(edit_path)[0]
            sim = m_sim(src, edit, backend)
            d = m_dir(src, edit, rec.source_prompt, rec.edit_prompt, backend)
            rows.append(ScoreRow(method, rec.edit_type.value, rec.id, sim, d, m_geo(sim, d)))
    return rows, missing


@dataclass
class MetricReport:
    overall: dict[str, dict[str, float]]  # method -> metric -> mean
    per_type: dict[str, dict[str, dict[str, float]]]  # metric -> method -> edit type -> mean
    ranking: list[str]  # methods by descending overall M_geo
    accuracy: dict[str, dict[str, float]] | None = None  # metric -> edit type/total -> accuracy
    spearman: dict[str, dict[str, float | None]] | None = None
    reasons: dict[str, dict[str, float]] | None = None
    missing: list[tuple[str, str]] = field(default_factory=list)

    def best_per_type(self, edit_type: str, metric: str = "m_geo") -> str:
        table = self.per_type[metric]
        candidates = {m: v[edit_type] for m, v in table.items() if edit_type in v}
        return max(candidates, key=candidates.get)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["missing"] = [list(x) for x in self.missing]
        return d


def aggregate(rows: Sequence[ScoreRow]) -> tuple[dict, dict]:
    """Means per method overall and per (method, edit type).

    Pre-aggregated rows (no task id) are taken as given; an explicit
    edit_type "all" row overrides the mean of per-type rows.
    """
    overall: dict[str, dict[str, float]] = {}
    per_type: dict[str, dict[str, dict[str, float]]] = {m: {} for m in METRICS}
    methods = sorted({r.method for r in rows}, key=lambda m: [r.method for r in rows].index(m))
    for method in methods:
        mine = [r for r in rows if r.method == method]
        overall[method] = {}
        for metric in METRICS:
            explicit = [getattr(r, metric) for r in mine if r.edit_type == OVERALL and getattr(r, metric) is not None]
            pooled = [getattr(r, metric) for r in mine if r.edit_type != OVERALL and getattr(r, metric) is not None]
            if explicit:
                overall[method][metric] = float(np.mean(explicit))
            elif pooled:
                overall[method][metric] = float(np.mean(pooled))
            by_type = {}
            for et in EDIT_TYPES:
                vals = [getattr(r, metric) for r in mine if r.edit_type == et.value and getattr(r, metric) is not None]
                if vals:
                    by_type[et.value] = float(np.mean(vals))
            if by_type:
                per_type[metric][method] = by_type
    return overall, per_type


def build_report(rows: Sequence[ScoreRow], comparisons: Sequence[PairedComparison] | None = None,
                 edit_types: Mapping[str, str] | None = None, out_dir: str | Path | None = None,
                 missing: Sequence[tuple[str, str]] = ()) -> MetricReport:
    overall, per_type = aggregate(rows)
    ranking = sorted((m for m in overall if "m_geo" in overall[m]), key=lambda m: -overall[m]["m_geo"])
    report = MetricReport(overall, per_type, ranking, missing=list(missing))
    if comparisons:
        scored = [m for m in METRICS if all(m in c.scores_a and m in c.scores_b for c in comparisons)]
        report.accuracy = {m: metric_classification_accuracy(comparisons, m, edit_types) for m in scored}
        report.spearman = {m: metric_human_spearman(comparisons, m, edit_types) for m in scored}
        methods = sorted({c.method_a for c in comparisons} | {c.method_b for c in comparisons})
        report.reasons = {m: reason_breakdown(comparisons, m) for m in methods}
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.3f}"


def render_tables(report: MetricReport) -> str:
    types = [et.value for et in EDIT_TYPES]
    lines = ["Automatic scores (mean over tasks)", f"{'method':<16}{'M_dir':>8}{'M_geo':>8}"]
    for m in report.ranking:
        lines.append(f"{m:<16}{_fmt(report.overall[m].get('m_dir')):>8}{_fmt(report.overall[m].get('m_geo')):>8}")
    for metric in ("m_geo", "m_dir"):
        table = report.per_type.get(metric) or {}
        if not table:
            continue
        lines += ["", f"{metric} by edit type", f"{'method':<16}" + "".join(f"{t:>15}" for t in types)]
        for m, row in table.items():
            lines.append(f"{m:<16}" + "".join(f"{_fmt(row.get(t)):>15}" for t in types))
    lines.append("")
    if report.accuracy is None:
        lines.append("Metric/human alignment: no labels")
    else:
        cols = types + ["total"]
        lines += ["Classification accuracy vs majority vote", f"{'metric':<16}" + "".join(f"{t:>15}" for t in cols)]
        for metric, row in report.accuracy.items():
            lines.append(f"{metric:<16}" + "".join(f"{_fmt(row.get(t)):>15}" for t in cols))
        lines += ["", "Spearman rho (score difference vs vote margin)",
                  f"{'metric':<16}" + "".join(f"{t:>15}" for t in cols)]
        for metric, row in report.spearman.items():
            lines.append(f"{metric:<16}" + "".join(f"{_fmt(row.get(t)):>15}" for t in cols))
        lines += ["", "Reasons among winning votes",
                  f"{'method':<16}{'text':>10}{'source':>10}{'both':>10}"]
        for m, r in report.reasons.items():
            lines.append(f"{m:<16}{r['text-alignment']:>10.3f}{r['source-consistency']:>10.3f}{r['both']:>10.3f}")
    if report.missing:
        lines += ["", f"Missing edits: {len(report.missing)}"]
        lines += [f"  {m}/{t}" for m, t in report.missing]
    return "\n".join(lines) + "\n"


def write_report(report: MetricReport, out_dir: str | Path) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    (out / "tables.txt").write_text(render_tables(report))
    png_meta = {"Software": None}

    if report.ranking:
        fig, ax = plt.subplots(figsize=(6, 3))
        ax.bar(report.ranking, [report.overall[m]["m_geo"] for m in report.ranking], color="tab:blue")
        ax.set_ylabel("mean M_geo")
        ax.tick_params(axis="x", labelrotation=30)
        fig.tight_layout()
        fig.savefig(out / "m_geo_by_method.png", metadata=png_meta)
        plt.close(fig)

    if report.reasons:
        methods = list(report.reasons)
        fig, ax = plt.subplots(figsize=(6, 3))
        bottom = np.zeros(len(methods))
        for key, color in (("text-alignment", "tab:green"), ("source-consistency", "tab:orange"),
                           ("both", "tab:gray")):
            vals = np.array([report.reasons[m][key] for m in methods])
            ax.bar(methods, vals, bottom=bottom, label=key, color=color)
            bottom += vals
        ax.set_ylabel("share of winning votes")
        ax.legend(fontsize=7)
        ax.tick_params(axis="x", labelrotation=30)
        fig.tight_layout()
        fig.savefig(out / "reasons.png", metadata=png_meta)
        plt.close(fig)
    return out
