"""Command-line entry point: synth, run, metrics, report.

Exit codes: 0 success, 1 partial cell failures, 2 configuration or flag
errors, 3 data or I/O errors. Diagnostics go to stderr; stdout carries
only the machine-readable payload of the metrics subcommand.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .data import PixelMask
from .errors import BenchError, ConfigError, DataError, MetricError, ProtocolError, ReportError
from .metrics import LabeledScores, aupro, auroc, average_precision, mean_spro, pooled_pixel_scores
from .pgm import read_pgm
from .report import emit_report, load_results
from .runner import SCHEMA_VERSION, load_config, run_experiment
from .synth import SynthSpec, synth_dataset, write_dataset_tree

_POSITIVE = {"1", "abnormal", "anomalous", "pos", "positive", "true", "defect"}
_NEGATIVE = {"0", "normal", "neg", "negative", "false", "good"}


def _err(message: str) -> None:
    print(f"iadbench: {message}", file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="iadbench",
        description="Benchmark engine for industrial image anomaly detection.",
    )
    parser.add_argument(
        "--version",
        action="version",
        version=f"iadbench 0.1.0 (schema {SCHEMA_VERSION})",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="materialize a synthetic dataset tree")
    p_synth.add_argument("--spec", required=True, help="JSON file path or inline JSON object")
    p_synth.add_argument("--seed", type=int, required=True)
    p_synth.add_argument("--out", required=True, help="output dataset root")
    p_synth.set_defaults(func=cmd_synth)

    p_run = sub.add_parser("run", help="run the experiment matrix of a config")
    p_run.add_argument("--config", required=True, help="experiment config JSON")
    p_run.add_argument("--threads", type=int, default=1)
    p_run.add_argument("--save-banks", action="store_true")
    p_run.set_defaults(func=cmd_run)

    p_metrics = sub.add_parser("metrics", help="compute metrics on standalone inputs")
    p_metrics.add_argument("--scores", help="CSV of id,score,label for ranking metrics")
    p_metrics.add_argument("--maps", help="directory of PGM score maps")
    p_metrics.add_argument("--masks", help="directory of PGM ground-truth masks")
    p_metrics.add_argument("--pro-limit", type=float, default=0.3)
    p_metrics.add_argument("--spro-limit", type=float, default=0.05)
    p_metrics.set_defaults(func=cmd_metrics)

    p_report = sub.add_parser("report", help="regenerate a report from results.json")
    p_report.add_argument("--in", dest="results", required=True, help="path to results.json")
    p_report.add_argument("--format", required=True, choices=["csv", "markdown"])
    p_report.set_defaults(func=cmd_report)
    return parser


def cmd_synth(args) -> int:
    spec_text = args.spec
    if spec_text.lstrip().startswith("{"):
        raw = spec_text
    else:
        try:
            with open(spec_text, "r", encoding="utf-8") as fh:
                raw = fh.read()
        except OSError as exc:
            _err(f"cannot read spec: {exc}")
            return 3
    try:
        spec = SynthSpec.from_dict(json.loads(raw))
    except json.JSONDecodeError as exc:
        _err(f"spec is not valid JSON: {exc}")
        return 2
    except ConfigError as exc:
        _err(str(exc))
        return 2
    dataset = synth_dataset(spec, args.seed)
    try:
        write_dataset_tree(dataset, args.out)
    except OSError as exc:
        _err(f"cannot write dataset: {exc}")
        return 3
    n_train = sum(len(v) for v in dataset.train.values())
    n_test = sum(len(v) for v in dataset.test.values())
    _err(
        f"wrote {len(dataset.categories)} categories "
        f"({n_train} train, {n_test} test samples) to {args.out}"
    )
    return 0


def cmd_run(args) -> int:
    try:
        config = load_config(args.config, os.environ.get("IADBENCH_DATA_ROOT"))
        if config.output_dir is None:
            raise ConfigError("invalid-config", "output_dir: required to run experiments")
        if args.threads < 1:
            raise ConfigError("invalid-config", "--threads must be >= 1")
    except ConfigError as exc:
        _err(str(exc))
        return 2
    try:
        result = run_experiment(config, threads=args.threads, save_banks=args.save_banks)
    except (ConfigError, ProtocolError) as exc:
        _err(str(exc))
        return 2
    except BenchError as exc:
        _err(str(exc))
        return 3
    except OSError as exc:
        _err(f"i/o failure: {exc}")
        return 3
    if result.failures:
        for cell_id in result.failures:
            cell = next(c for c in result.document["cells"] if c["cell_id"] == cell_id)
            _err(f"cell {cell_id} failed: {cell['error']['code']}: {cell['error']['message']}")
        _err(f"{len(result.failures)} of {len(result.document['cells'])} cells failed")
        return 1
    _err(f"{len(result.document['cells'])} cells ok, results in {result.output_dir}")
    return 0


def _read_scores_csv(path: str) -> LabeledScores:
    scores = []
    labels = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 3:
                raise DataError("malformed-csv", f"{path}:{line_no}: need id,score,label")
            try:
                score = float(parts[1])
            except ValueError:
                if line_no == 1:
                    continue  # header row
                raise DataError("malformed-csv", f"{path}:{line_no}: bad score {parts[1]!r}")
            label = parts[2].lower()
            if label in _POSITIVE:
                labels.append(True)
            elif label in _NEGATIVE:
                labels.append(False)
            else:
                raise DataError("malformed-csv", f"{path}:{line_no}: bad label {parts[2]!r}")
            scores.append(score)
    if not scores:
        raise DataError("malformed-csv", f"{path}: no data rows")
    return LabeledScores(scores, labels)


def _read_map_pairs(maps_dir: str, masks_dir: str) -> tuple[list[np.ndarray], list[PixelMask]]:
    try:
        names = sorted(f for f in os.listdir(maps_dir) if f.endswith(".pgm"))
    except OSError as exc:
        raise DataError("malformed-pgm", f"cannot list {maps_dir}: {exc}") from exc
    if not names:
        raise DataError("malformed-pgm", f"no PGM score maps in {maps_dir}")
    score_maps = []
    masks = []
    for name in names:
        stem = os.path.splitext(name)[0]
        candidates = [name, f"{stem}_mask.pgm"]
        mask_path = next(
            (
                os.path.join(masks_dir, c)
                for c in candidates
                if os.path.isfile(os.path.join(masks_dir, c))
            ),
            None,
        )
        if mask_path is None:
            raise DataError("missing-mask", f"no mask for score map {name} in {masks_dir}")
        smap = read_pgm(os.path.join(maps_dir, name)) / 255.0
        mask = PixelMask(read_pgm(mask_path) > 0)
        if mask.bits.shape != smap.shape:
            raise DataError(
                "dim-mismatch", f"{name}: map {smap.shape} vs mask {mask.bits.shape}"
            )
        score_maps.append(smap)
        masks.append(mask)
    return score_maps, masks


def _print_metric_json(values: dict[str, float]) -> None:
    body = ", ".join(f'"{k}": {v:.4f}' for k, v in values.items())
    print("{" + body + "}")


def cmd_metrics(args) -> int:
    scores_mode = args.scores is not None
    maps_mode = args.maps is not None or args.masks is not None
    if scores_mode == maps_mode:
        _err("exactly one of --scores or --maps/--masks is required")
        return 2
    if maps_mode and (args.maps is None or args.masks is None):
        _err("--maps and --masks must be given together")
        return 2
    try:
        if scores_mode:
            data = _read_scores_csv(args.scores)
            values = {"auroc": auroc(data), "ap": average_precision(data)}
        else:
            score_maps, masks = _read_map_pairs(args.maps, args.masks)
            pooled = pooled_pixel_scores(score_maps, masks)
            values = {
                "pixel_auroc": auroc(pooled),
                "pixel_ap": average_precision(pooled),
                "aupro": aupro(score_maps, masks, args.pro_limit),
                "mean_spro": aupro(score_maps, masks, args.spro_limit),
            }
    except (DataError, MetricError) as exc:
        _err(str(exc))
        return 3
    except OSError as exc:
        _err(f"cannot read inputs: {exc}")
        return 3
    _print_metric_json(values)
    return 0


def cmd_report(args) -> int:
    try:
        document = load_results(args.results)
        path = emit_report(document, args.format, os.path.dirname(os.path.abspath(args.results)))
    except ReportError as exc:
        _err(str(exc))
        return 3
    _err(f"wrote {path}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
