"""Result persistence: canonical JSON, delimited CSV, and markdown tables.

All numeric report output is fixed to 4 decimal places (round half to
even). The JSON document is the canonical record; CSV and markdown are
pure functions of it, so regenerating them from results.json reproduces
the run's own report files byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import os

from .errors import ReportError

CSV_METRICS = (
    "image_auroc",
    "image_ap",
    "pixel_auroc",
    "pixel_ap",
    "aupro",
    "mean_spro",
    "fm",
)

# lower is better only for forgetting
_LOWER_IS_BETTER = {"fm"}


def _fmt(value) -> str:
    if value is None:
        return ""
    return format(float(value), ".4f")


def render_json(document: dict) -> str:
    return json.dumps(document, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def render_csv(document: dict) -> str:
    header = ["category", "setting", *CSV_METRICS, "latency_p50_ms", "bank_bytes"]
    lines = [",".join(header)]
    timings = document.get("timings", {})
    for cell in document["cells"]:
        metrics = cell.get("metrics", {})
        row = [cell["category"], cell["setting"]]
        row.extend(_fmt(metrics.get(name)) for name in CSV_METRICS)
        timing = timings.get(cell["cell_id"], {})
        row.append(_fmt(timing.get("latency_ms_p50")))
        row.append(str(cell.get("bank_bytes", "")))
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def _best_per_column(rows: list[dict], names: list[str]) -> dict[str, float]:
    best = {}
    for name in names:
        values = [r[name] for r in rows if r.get(name) is not None]
        if values:
            best[name] = min(values) if name in _LOWER_IS_BETTER else max(values)
    return best


def _unweighted_means(rows: list[dict], names: list[str]) -> dict[str, float]:
    """Category aggregation: plain mean over cells where the metric applies."""
    means = {}
    for name in names:
        values = [r[name] for r in rows if r.get(name) is not None]
        if values:
            means[name] = sum(values) / len(values)
    return means


def _md_table(header: list[str], body: list[list[str]]) -> list[str]:
    lines = ["| " + " | ".join(header) + " |"]
    lines.append("|" + "|".join(" --- " for _ in header) + "|")
    for row in body:
        lines.append("| " + " | ".join(row) + " |")
    return lines


def render_markdown(document: dict) -> str:
    requested = [m for m in CSV_METRICS if m in document.get("metrics_requested", CSV_METRICS)]
    settings: dict[str, list[dict]] = {}
    for cell in document["cells"]:
        settings.setdefault(cell["setting"], []).append(cell)

    lines = ["# Benchmark report", ""]
    lines.append(f"Config hash: `{document['config_hash']}`  ")
    lines.append(f"Seed: {document['seed']}")
    lines.append("")

    for setting in sorted(settings):
        cells = sorted(settings[setting], key=lambda c: c["category"])
        rows = [dict(c.get("metrics", {}), category=c["category"]) for c in cells]
        lines.append(f"## Setting: {setting}")
        lines.append("")
        failed = [c["category"] for c in cells if c.get("status") != "ok"]
        if failed:
            lines.append(f"Failed cells: {', '.join(failed)}")
            lines.append("")

        paired = setting.startswith("continual") and "fm" in requested and "image_auroc" in requested
        columns = [m for m in requested if not (paired and m in ("image_auroc", "fm"))]
        best = _best_per_column(rows, requested)

        header = ["category"]
        if paired:
            header.append("Image AUC (higher better) / FM (lower better)")
        header.extend(columns)
        body = []
        for row in rows:
            out = [row["category"]]
            if paired:
                auc, fm = row.get("image_auroc"), row.get("fm")
                auc_s = _mark(_fmt(auc), auc is not None and auc == best.get("image_auroc"))
                fm_s = _mark(_fmt(fm), fm is not None and fm == best.get("fm")) if fm is not None else "n/a"
                out.append(f"{auc_s} / {fm_s}")
            for name in columns:
                value = row.get(name)
                if value is None:
                    out.append("n/a")
                else:
                    out.append(_mark(_fmt(value), value == best.get(name)))
            body.append(out)
        if len(rows) > 1:
            means = _unweighted_means(rows, requested)
            out = ["mean"]
            if paired:
                auc_s = _fmt(means.get("image_auroc")) or "n/a"
                fm_s = _fmt(means.get("fm")) or "n/a"
                out.append(f"{auc_s} / {fm_s}")
            out.extend(_fmt(means.get(name)) or "n/a" for name in columns)
            body.append(out)
        lines.extend(_md_table(header, body))
        lines.append("")

    matrices = document.get("task_matrices", {})
    for label in sorted(matrices):
        matrix = matrices[label]
        lines.append(f"## Task matrix: {label}")
        lines.append("")
        lines.append(f"Mean FM: {_fmt(matrix['fm_mean'])} over {matrix['k']} steps")
        lines.append("")
        header = ["step \\ task", *[str(j) for j in range(1, matrix["k"] + 1)]]
        body = []
        for l in range(1, matrix["k"] + 1):
            row = [str(l)]
            for j in range(1, matrix["k"] + 1):
                row.append(_fmt(matrix["entries"].get(f"{l},{j}")) or "")
            body.append(row)
        lines.extend(_md_table(header, body))
        lines.append("")
    return "\n".join(lines).rstrip("\n") + "\n"


def _mark(text: str, is_best: bool) -> str:
    return f"**{text}**" if is_best and text else text


def write_reports(document: dict, out_dir: str) -> dict[str, str]:
    """Write results.json, results.csv, and report.md into out_dir."""
    paths = {}
    for fmt in ("json", "csv", "markdown"):
        paths[fmt] = emit_report(document, fmt, out_dir)
    return paths


def emit_report(document: dict, fmt: str, out_dir: str) -> str:
    if not document.get("cells"):
        raise ReportError("empty-results", "no cells to report")
    renderers = {
        "json": ("results.json", render_json),
        "csv": ("results.csv", render_csv),
        "markdown": ("report.md", render_markdown),
    }
    if fmt not in renderers:
        raise ReportError("empty-results", f"unknown report format {fmt!r}")
    name, renderer = renderers[fmt]
    path = os.path.join(out_dir, name)
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(renderer(document))
    except OSError as exc:
        raise ReportError("io-failure", f"cannot write {path}: {exc}") from exc
    return path


def load_results(path: str) -> dict:
    """Read a results.json and verify its embedded config hash."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            document = json.load(fh)
    except OSError as exc:
        raise ReportError("io-failure", f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ReportError("io-failure", f"{path} is not valid JSON: {exc}") from exc
    for key in ("config", "config_hash", "cells"):
        if key not in document:
            raise ReportError("io-failure", f"{path}: missing key {key!r}")
    payload = json.dumps(
        document["config"], sort_keys=True, separators=(",", ":"), ensure_ascii=False
    ).encode("utf-8")
    digest = hashlib.sha256(payload).hexdigest()
    if digest != document["config_hash"]:
        raise ReportError(
            "io-failure", f"{path}: config hash mismatch (corrupted results?)"
        )
    return document
