"""Writing and reading cross-validation reports.

Files written by :func:`emit_report`:

- ``report.json``: the full report
- ``metrics.csv``: one row per fold, then ``mean``, ``sd`` (full precision)
  and ``mean±sd`` (three decimals) rows
- ``predictions.csv``: one row per held-out exam
- classification: ``roc.csv``, ``pr.csv``, ``roc.svg``, ``pr.svg``
- regression: ``healing_curve_<subject>.svg`` for every patient with a full
  ten-timepoint trajectory (predicted and true score, one polyline each)
"""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Sequence

from .evaluation import CVError, CVReport, CurvePoints, roc_pr

SVG_W, SVG_H, MARGIN = 480, 360, 50
TICK_LABELS = ("pre", "1w", "3w", "6w", "9w", "12w", "4.5m", "6m", "9m", "12m")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _csv(rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def metrics_rows(report: CVReport) -> list[list]:
    names = [n for n in report.metric_names if n in report.aggregate]
    rows: list[list] = [["fold", *names]]
    for f in report.folds:
        rows.append([f["fold"], *(f.get(n) for n in names)])
    rows.append(["mean", *(report.aggregate[n][0] for n in names)])
    rows.append(["sd", *(report.aggregate[n][1] for n in names)])
    rows.append(["mean±sd", *(f"{report.aggregate[n][0]:.3f}±{report.aggregate[n][1]:.3f}" for n in names)])
    return rows


def _curve_csv(curve: CurvePoints) -> str:
    x_name, y_name = ("fpr", "tpr") if curve.kind == "roc" else ("recall", "precision")
    return _csv([["threshold", x_name, y_name], *zip(curve.thresholds, curve.x, curve.y)])


def _svg(title: str, x_label: str, y_label: str, series: Sequence[tuple[str, str, list, list]], xticks, yrange) -> str:
    """Line plot; ``series`` items are (label, colour, xs, ys) with xs in
    tick-index units when ``xticks`` is a list of labels."""
    x0, x1 = MARGIN, SVG_W - 20
    y0, y1 = SVG_H - MARGIN, 30
    lo, hi = yrange
    n_ticks = len(xticks)
    xmax = max(n_ticks - 1, 1)

    def px(v):
        return x0 + (x1 - x0) * v / xmax

    def py(v):
        return y0 - (y0 - y1) * (v - lo) / (hi - lo)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" viewBox="0 0 {SVG_W} {SVG_H}">',
        f"<title>{title}</title>",
        f'<rect x="0" y="0" width="{SVG_W}" height="{SVG_H}" fill="white"/>',
        f'<line class="axis" x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>',
        f'<line class="axis" x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>',
    ]
    for i, label in enumerate(xticks):
        x = px(i)
        parts.append(
            f'<g class="xtick"><line x1="{x:.2f}" y1="{y0}" x2="{x:.2f}" y2="{y0 + 5}" stroke="black"/>'
            f'<text x="{x:.2f}" y="{y0 + 18}" font-size="10" text-anchor="middle">{label}</text></g>'
        )
    for i in range(5):
        v = lo + (hi - lo) * i / 4
        parts.append(
            f'<g class="ytick"><line x1="{x0 - 5}" y1="{py(v):.2f}" x2="{x0}" y2="{py(v):.2f}" stroke="black"/>'
            f'<text x="{x0 - 8}" y="{py(v) + 3:.2f}" font-size="10" text-anchor="end">{v:g}</text></g>'
        )
    parts.append(f'<text x="{(x0 + x1) / 2}" y="{SVG_H - 10}" font-size="12" text-anchor="middle">{x_label}</text>')
    parts.append(
        f'<text x="14" y="{(y0 + y1) / 2}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 14 {(y0 + y1) / 2})">{y_label}</text>'
    )
    for j, (label, colour, xs, ys) in enumerate(series):
        points = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline fill="none" stroke="{colour}" stroke-width="2" points="{points}"><title>{label}</title></polyline>')
        parts.append(f'<text x="{x1 - 110}" y="{y1 + 14 * (j + 1)}" font-size="11" fill="{colour}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def curve_svg(curve: CurvePoints, auc: float | None = None) -> str:
    if curve.kind == "roc":
        title, xl, yl = f"ROC (AUC {auc:.3f})" if auc is not None else "ROC", "false positive rate", "true positive rate"
    else:
        title, xl, yl = "Precision-recall", "recall", "precision"
    ticks = [f"{v:.1f}" for v in (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)]
    xs = [x * 5 for x in curve.x]  # tick-index units
    return _svg(title, xl, yl, [(curve.kind.upper(), "#1f77b4", xs, curve.y)], ticks, (0.0, 1.0))


def healing_curve_svg(subject: str, target: str | None, rows: Sequence[dict]) -> str:
    rows = sorted(rows, key=lambda r: r["timepoint"])
    tps = [r["timepoint"] for r in rows]
    series = [
        ("predicted", "#d62728", tps, [r["predicted"] for r in rows]),
        ("ground truth", "#1f77b4", tps, [r["ground_truth"] for r in rows]),
    ]
    title = f"{subject} {target or ''} healing curve".replace("  ", " ")
    return _svg(title, "timepoint", f"{target or 'score'} (1 healthy, 7 severe)", series, TICK_LABELS, (1.0, 7.0))


def emit_report(report: CVReport, outdir: str | Path) -> list[Path]:
    if not report.folds or not report.predictions:
        raise CVError("refusing to write an empty report")
    report.check()
    outdir = Path(outdir)
    try:
        outdir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write report to {outdir}: {exc.strerror or exc}") from exc
    files: dict[str, str] = {
        "report.json": json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n",
        "metrics.csv": _csv(metrics_rows(report)),
        "predictions.csv": _csv(
            [["exam_id", "subject_id", "timepoint", "predicted", "ground_truth", "fold"]]
            + [[r["exam_id"], r["subject_id"], r["timepoint"], r["predicted"], r["ground_truth"], r["fold"]] for r in report.predictions]
        ),
    }
    if report.task == "classify" and report.slice_scores:
        labels = [l for _, l in report.slice_scores]
        if 0 < sum(labels) < len(labels):
            roc, auc, pr = roc_pr([v for v, _ in report.slice_scores], labels)
            files["roc.csv"] = _curve_csv(roc)
            files["pr.csv"] = _curve_csv(pr)
            files["roc.svg"] = curve_svg(roc, auc)
            files["pr.svg"] = curve_svg(pr)
    if report.task == "regress":
        by_subject: dict[str, list[dict]] = {}
        for r in report.predictions:
            by_subject.setdefault(r["subject_id"], []).append(r)
        for sid, rows in sorted(by_subject.items()):
            if sorted(r["timepoint"] for r in rows) == list(range(len(TICK_LABELS))):
                files[f"healing_curve_{sid}.svg"] = healing_curve_svg(sid, report.target, rows)
    written = []
    for name, text in files.items():
        path = outdir / name
        path.write_text(text, encoding="utf-8")
        written.append(path)
    return written


def read_metrics_csv(path: str | Path) -> dict[str, dict[str, float]]:
    """Rows of metrics.csv keyed by their first column (fold number, mean, sd)."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, out = rows[0], {}
    for row in rows[1:]:
        if row[0] == "mean±sd":
            continue
        out[row[0]] = {name: (float(v) if v else None) for name, v in zip(header[1:], row[1:])}
    return out


def load_report(outdir: str | Path) -> CVReport:
    """Load report.json and check metrics.csv against it."""
    outdir = Path(outdir)
    report = CVReport.from_dict(json.loads((outdir / "report.json").read_text(encoding="utf-8")))
    metrics = read_metrics_csv(outdir / "metrics.csv")
    for name, (mean, sd) in report.aggregate.items():
        if metrics["mean"][name] != mean or metrics["sd"][name] != sd:
            raise CVError(f"metrics.csv aggregate for {name} disagrees with report.json")
    return report
