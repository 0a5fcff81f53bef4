"""Experiment orchestration over (category x setting) cells.

A JSON config pins the dataset source, the settings to run, the
detector parameters, and the requested metrics. Cells are independent
jobs with seeds derived from the config hash and the cell coordinates,
so results are identical no matter how many worker threads execute
them; wall-clock timings are the only schedule-dependent output and are
quarantined in their own subtree of the results document.
"""

from __future__ import annotations

import hashlib
import json
import os
import resource
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import ABNORMAL, NORMAL, Dataset, Sample, load_dataset
from .detector import (
    CoresetParams,
    MemoryBank,
    build_bank,
    coreset_select,
    extend_bank_for_task,
    render_anomaly_map,
    score_image,
    write_bank_file,
)
from .errors import BenchError, ConfigError, MetricError, ProtocolError
from .features import FeatureProviderConfig, extract_features
from .metrics import (
    LabeledScores,
    RegionSet,
    TaskMatrix,
    aupro,
    auroc,
    average_precision,
    connected_regions,
    forgetting_measure,
    mean_spro,
    pooled_pixel_scores,
)
from .protocols import (
    SettingConfig,
    Split,
    TrainItem,
    augment_rotations,
    inject_noise,
    make_continual,
    make_fewshot,
    make_supervised,
    make_unsupervised,
)
from .rng import derive_seed
from .synth import SynthSpec, synth_dataset

SCHEMA_VERSION = 1

METRIC_NAMES = (
    "image_auroc",
    "image_ap",
    "pixel_auroc",
    "pixel_ap",
    "aupro",
    "mean_spro",
    "fm",
)

DEFAULT_PRO_LIMIT = 0.3
DEFAULT_SPRO_LIMIT = 0.05


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ExperimentConfig:
    dataset_path: str | None
    synth_spec: SynthSpec | None
    categories: list[str] | None
    settings: list[dict]
    feature: FeatureProviderConfig
    coreset_fraction: float | None
    coreset_l: int | None
    projection_dim: int | None
    b: int
    smoothing_sigma: float
    metric_names: tuple[str, ...]
    pro_limit: float
    spro_limit: float
    seed: int
    output_dir: str | None
    canonical: dict  # hashed + embedded form (location-free)

    @property
    def config_hash(self) -> str:
        payload = json.dumps(
            self.canonical, sort_keys=True, separators=(",", ":"), ensure_ascii=False
        ).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()


def _expect_keys(obj: dict, path: str, required: set[str], optional: set[str]) -> None:
    unknown = set(obj) - required - optional
    if unknown:
        raise ConfigError("invalid-config", f"{path}: unknown keys {sorted(unknown)}")
    missing = required - set(obj)
    if missing:
        raise ConfigError("invalid-config", f"{path}: missing keys {sorted(missing)}")


def _expect_type(value, path: str, kind, label: str):
    if kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    else:
        ok = isinstance(value, kind)
    if not ok:
        raise ConfigError("invalid-config", f"{path}: must be {label}")
    return value


def _parse_setting(raw: dict, path: str) -> list[dict]:
    """Expand one setting object into concrete cells (lists sweep)."""
    _expect_type(raw, path, dict, "an object")
    stype = raw.get("type")
    if stype == "unsupervised":
        _expect_keys(raw, path, {"type"}, set())
        return [{"type": stype, "label": "unsupervised"}]
    if stype == "supervised":
        _expect_keys(raw, path, {"type"}, {"n"})
        n = _expect_type(raw.get("n", 10), f"{path}.n", int, "an integer")
        if n < 0:
            raise ConfigError("invalid-config", f"{path}.n: must be >= 0")
        return [{"type": stype, "n": n, "label": f"supervised_n{n}"}]
    if stype == "fewshot":
        _expect_keys(raw, path, {"type", "m"}, {"rotation_k", "allow_custom_m"})
        shots = raw["m"] if isinstance(raw["m"], list) else [raw["m"]]
        rotation_k = _expect_type(raw.get("rotation_k", 1), f"{path}.rotation_k", int, "an integer")
        allow = bool(raw.get("allow_custom_m", False))
        out = []
        for m in shots:
            _expect_type(m, f"{path}.m", int, "an integer")
            try:
                SettingConfig(setting="fewshot", m=m, rotation_k=rotation_k, allow_custom=allow)
            except ProtocolError as exc:
                raise ConfigError("invalid-config", f"{path}: {exc.message}") from exc
            label = f"fewshot_m{m}" + (f"_rot{rotation_k}" if rotation_k > 1 else "")
            out.append(
                {"type": stype, "m": m, "rotation_k": rotation_k, "allow_custom_m": allow,
                 "label": label}
            )
        return out
    if stype == "noisy":
        _expect_keys(raw, path, {"type", "noise_ratio"}, {"allow_custom_ratio"})
        ratios = raw["noise_ratio"] if isinstance(raw["noise_ratio"], list) else [raw["noise_ratio"]]
        allow = bool(raw.get("allow_custom_ratio", False))
        out = []
        for ratio in ratios:
            _expect_type(ratio, f"{path}.noise_ratio", float, "a number")
            try:
                SettingConfig(setting="noisy", noise_ratio=float(ratio), allow_custom=allow)
            except ProtocolError as exc:
                raise ConfigError("invalid-config", f"{path}: {exc.message}") from exc
            out.append(
                {"type": stype, "noise_ratio": float(ratio), "allow_custom_ratio": allow,
                 "label": f"noisy_r{ratio:g}"}
            )
        return out
    if stype == "continual":
        _expect_keys(raw, path, {"type"}, {"category_order"})
        order = raw.get("category_order")
        if order is not None:
            _expect_type(order, f"{path}.category_order", list, "a list")
        return [{"type": stype, "category_order": order, "label": "continual"}]
    raise ConfigError("invalid-config", f"{path}.type: unknown setting {stype!r}")


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a config document; unknown keys anywhere are errors."""
    _expect_type(raw, "config", dict, "an object")
    _expect_keys(
        raw,
        "config",
        {"dataset", "setting", "seed"},
        {"schema", "categories", "detector", "metrics", "output_dir"},
    )
    schema = raw.get("schema", SCHEMA_VERSION)
    if schema != SCHEMA_VERSION:
        raise ConfigError("invalid-config", f"schema: unsupported version {schema!r}")

    dataset = _expect_type(raw["dataset"], "dataset", dict, "an object")
    _expect_keys(dataset, "dataset", set(), {"path", "synthetic"})
    if "path" in dataset and "synthetic" in dataset:
        raise ConfigError("invalid-config", "dataset: path and synthetic are exclusive")
    if "path" not in dataset and "synthetic" not in dataset:
        raise ConfigError(
            "invalid-config",
            "dataset: needs path or synthetic (or set IADBENCH_DATA_ROOT)",
        )
    dataset_path = dataset.get("path")
    if dataset_path is not None:
        _expect_type(dataset_path, "dataset.path", str, "a string")
    synth_spec = None
    if "synthetic" in dataset:
        synth_spec = SynthSpec.from_dict(
            _expect_type(dataset["synthetic"], "dataset.synthetic", dict, "an object"),
            "dataset.synthetic",
        )

    categories = raw.get("categories")
    if categories is not None:
        _expect_type(categories, "categories", list, "a list")
        for c in categories:
            _expect_type(c, "categories[]", str, "a string")

    raw_settings = raw["setting"] if isinstance(raw["setting"], list) else [raw["setting"]]
    if not raw_settings:
        raise ConfigError("invalid-config", "setting: must not be empty")
    settings = []
    for i, entry in enumerate(raw_settings):
        settings.extend(_parse_setting(entry, f"setting[{i}]"))
    labels = [s["label"] for s in settings]
    if len(labels) != len(set(labels)):
        raise ConfigError("invalid-config", "setting: duplicate setting instances")

    detector = raw.get("detector", {})
    _expect_type(detector, "detector", dict, "an object")
    _expect_keys(detector, "detector", set(), {"feature", "coreset", "b", "smoothing_sigma"})
    feature_raw = _expect_type(
        detector.get("feature", {}), "detector.feature", dict, "an object"
    )
    _expect_keys(feature_raw, "detector.feature", set(), {"patch_size", "stride", "descriptor"})
    patch_size = _expect_type(
        feature_raw.get("patch_size", 8), "detector.feature.patch_size", int, "an integer"
    )
    stride = _expect_type(
        feature_raw.get("stride", 4), "detector.feature.stride", int, "an integer"
    )
    descriptor = feature_raw.get("descriptor", "raw-patch")
    try:
        feature = FeatureProviderConfig(patch_size=patch_size, stride=stride, descriptor=descriptor)
    except ConfigError as exc:
        raise ConfigError("invalid-config", f"detector.feature: {exc.message}") from exc

    coreset = _expect_type(
        detector.get("coreset", {}), "detector.coreset", dict, "an object"
    )
    _expect_keys(coreset, "detector.coreset", set(), {"target_fraction", "l", "projection_dim"})
    fraction = coreset.get("target_fraction")
    absolute = coreset.get("l")
    if fraction is not None and absolute is not None:
        raise ConfigError(
            "invalid-config", "detector.coreset: target_fraction and l are exclusive"
        )
    if fraction is None and absolute is None:
        fraction = 1.0  # keep the full bank by default
    if fraction is not None:
        _expect_type(fraction, "detector.coreset.target_fraction", float, "a number")
        if not 0.0 < float(fraction) <= 1.0:
            raise ConfigError(
                "invalid-config", "detector.coreset.target_fraction: must be in (0, 1]"
            )
        fraction = float(fraction)
    if absolute is not None:
        _expect_type(absolute, "detector.coreset.l", int, "an integer")
        if absolute < 1:
            raise ConfigError("invalid-config", "detector.coreset.l: must be >= 1")
    projection_dim = coreset.get("projection_dim")
    if isinstance(projection_dim, str) and projection_dim == "none":
        projection_dim = None
    if projection_dim is not None:
        _expect_type(projection_dim, "detector.coreset.projection_dim", int, "an integer")
        if projection_dim < 1:
            raise ConfigError("invalid-config", "detector.coreset.projection_dim: must be >= 1")

    b = _expect_type(detector.get("b", 1), "detector.b", int, "an integer")
    if b < 1:
        raise ConfigError("invalid-config", "detector.b: must be >= 1")
    sigma = _expect_type(
        detector.get("smoothing_sigma", 4.0), "detector.smoothing_sigma", float, "a number"
    )
    if sigma < 0:
        raise ConfigError("invalid-config", "detector.smoothing_sigma: must be >= 0")

    metrics_raw = raw.get("metrics", list(METRIC_NAMES))
    pro_limit, spro_limit = DEFAULT_PRO_LIMIT, DEFAULT_SPRO_LIMIT
    if isinstance(metrics_raw, dict):
        _expect_keys(metrics_raw, "metrics", set(), {"names", "pro_limit", "spro_limit"})
        names = metrics_raw.get("names", list(METRIC_NAMES))
        pro_limit = _expect_type(
            metrics_raw.get("pro_limit", DEFAULT_PRO_LIMIT), "metrics.pro_limit", float, "a number"
        )
        spro_limit = _expect_type(
            metrics_raw.get("spro_limit", DEFAULT_SPRO_LIMIT),
            "metrics.spro_limit",
            float,
            "a number",
        )
    else:
        names = metrics_raw
    _expect_type(names, "metrics.names", list, "a list")
    for name in names:
        if name not in METRIC_NAMES:
            raise ConfigError("invalid-config", f"metrics.names: unknown metric {name!r}")
    for limit, path in ((pro_limit, "metrics.pro_limit"), (spro_limit, "metrics.spro_limit")):
        if not 0.0 < float(limit) <= 1.0:
            raise ConfigError("invalid-config", f"{path}: must be in (0, 1]")

    seed = _expect_type(raw["seed"], "seed", int, "an integer")
    output_dir = raw.get("output_dir")
    if output_dir is not None:
        _expect_type(output_dir, "output_dir", str, "a string")

    canonical = {k: v for k, v in raw.items() if k != "output_dir"}
    canonical["schema"] = SCHEMA_VERSION

    return ExperimentConfig(
        dataset_path=dataset_path,
        synth_spec=synth_spec,
        categories=categories,
        settings=settings,
        feature=feature,
        coreset_fraction=fraction,
        coreset_l=absolute,
        projection_dim=projection_dim,
        b=b,
        smoothing_sigma=float(sigma),
        metric_names=tuple(names),
        pro_limit=float(pro_limit),
        spro_limit=float(spro_limit),
        seed=seed,
        output_dir=output_dir,
        canonical=canonical,
    )


def load_config(path: str, data_root_env: str | None = None) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError("invalid-config", f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("invalid-config", f"config {path} is not valid JSON: {exc}") from exc
    if (
        isinstance(raw, dict)
        and isinstance(raw.get("dataset"), dict)
        and not raw["dataset"]
        and data_root_env
    ):
        raw["dataset"] = {"path": data_root_env}
    return parse_config(raw)


# ---------------------------------------------------------------------------
# detector state and efficiency


@dataclass
class DetectorState:
    """A scored-and-frozen bank plus the knobs needed to run inference."""

    bank: MemoryBank
    feature: FeatureProviderConfig
    b: int
    smoothing_sigma: float

    def score_sample(self, sample: Sample) -> tuple[float, np.ndarray]:
        grid = extract_features(sample.image, self.feature)
        result, patch_map = score_image(self.bank, grid, self.b)
        pixel_map = render_anomaly_map(
            patch_map,
            sample.image.height,
            sample.image.width,
            self.feature.patch_size,
            self.feature.stride,
            self.smoothing_sigma,
        )
        return result.s, pixel_map


@dataclass
class EfficiencyStats:
    latency_ms_mean: float
    latency_ms_p50: float
    latency_ms_p95: float
    bank_bytes: int
    peak_rss_bytes: int


def _nearest_rank(sorted_values: list[float], q: float) -> float:
    rank = max(1, int(np.ceil(q * len(sorted_values))))
    return sorted_values[rank - 1]


def measure_efficiency(
    state: DetectorState, samples: list[Sample], warmup: int = 3
) -> EfficiencyStats:
    """Wall-clock per-image inference latency after warmup discards."""
    if len(samples) < warmup + 5:
        raise ConfigError(
            "too-few-samples", f"need >= {warmup + 5} samples, got {len(samples)}"
        )
    timings = []
    for sample in samples:
        start = time.perf_counter()
        state.score_sample(sample)
        timings.append((time.perf_counter() - start) * 1000.0)
    kept = sorted(timings[warmup:])
    return EfficiencyStats(
        latency_ms_mean=float(np.mean(kept)),
        latency_ms_p50=_nearest_rank(kept, 0.50),
        latency_ms_p95=_nearest_rank(kept, 0.95),
        bank_bytes=state.bank.count * state.bank.dim * 4,
        peak_rss_bytes=resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024,
    )


# ---------------------------------------------------------------------------
# cells


@dataclass
class CellResult:
    cell_id: str
    category: str
    setting: str
    status: str = "ok"
    error: dict | None = None
    metrics: dict = field(default_factory=dict)
    na_reasons: dict = field(default_factory=dict)
    provenance: list = field(default_factory=list)
    info: dict = field(default_factory=dict)
    bank_vectors: int = 0
    bank_bytes: int = 0
    cell_seed: int = 0
    efficiency: EfficiencyStats | None = None
    bank: MemoryBank | None = None  # retained only when snapshots are requested


def _build_split(dataset: Dataset, category: str, setting: dict, seed: int) -> Split:
    stype = setting["type"]
    if stype == "unsupervised":
        return make_unsupervised(dataset, category)
    if stype == "supervised":
        return make_supervised(dataset, category, setting["n"], seed)
    if stype == "fewshot":
        split = make_fewshot(
            dataset, category, setting["m"], seed, allow_any_m=setting["allow_custom_m"]
        )
        return augment_rotations(split, setting["rotation_k"])
    if stype == "noisy":
        return inject_noise(dataset, category, setting["noise_ratio"], seed)
    raise ConfigError("invalid-config", f"unexpected setting type {stype!r}")


def _train_bank(
    config: ExperimentConfig, train: list[TrainItem], coreset_seed: int
) -> MemoryBank:
    grids = [
        extract_features(item.sample.image, config.feature)
        for item in train
        if item.observed_label == NORMAL
    ]
    bank = build_bank(grids)
    params = CoresetParams(
        target_fraction=config.coreset_fraction,
        l=config.coreset_l,
        projection_dim=config.projection_dim,
        seed=coreset_seed,
    )
    picked = coreset_select(bank, params)
    if len(picked) == bank.count:
        return bank
    return MemoryBank(
        bank.dim, bank.vectors[picked], np.zeros(len(picked), np.uint32)
    )


def _category_region_sets(
    dataset: Dataset, category: str, test: list[Sample], maps: list[np.ndarray]
) -> list[RegionSet]:
    table = dataset.saturation_table.get(category, {})
    out = []
    for sample, smap in zip(test, maps):
        if sample.mask is None:
            out.append(RegionSet(smap.shape[0], smap.shape[1], []))
        else:
            out.append(connected_regions(sample.mask, table.get(sample.defect_type)))
    return out


def _cell_metrics(
    config: ExperimentConfig,
    dataset: Dataset,
    category: str,
    test: list[Sample],
    image_scores: list[float],
    pixel_maps: list[np.ndarray],
) -> tuple[dict, dict]:
    values: dict = {}
    reasons: dict = {}
    labels = [s.label == ABNORMAL for s in test]
    masks = [s.mask for s in test]

    def attempt(name, fn):
        if name not in config.metric_names:
            return
        try:
            values[name] = fn()
        except MetricError as exc:
            values[name] = None
            reasons[name] = exc.code

    attempt("image_auroc", lambda: auroc(LabeledScores(image_scores, labels)))
    attempt("image_ap", lambda: average_precision(LabeledScores(image_scores, labels)))
    attempt("pixel_auroc", lambda: auroc(pooled_pixel_scores(pixel_maps, masks)))
    attempt("pixel_ap", lambda: average_precision(pooled_pixel_scores(pixel_maps, masks)))
    attempt("aupro", lambda: aupro(pixel_maps, masks, config.pro_limit))
    if "mean_spro" in config.metric_names:
        if dataset.saturation_table.get(category):
            attempt(
                "mean_spro",
                lambda: mean_spro(
                    pixel_maps,
                    _category_region_sets(dataset, category, test, pixel_maps),
                    config.spro_limit,
                ),
            )
        else:
            values["mean_spro"] = None
            reasons["mean_spro"] = "no-saturation-table"
    if "fm" in config.metric_names:
        values.setdefault("fm", None)
        reasons.setdefault("fm", "not-continual")
    return values, reasons


def _run_plain_cell(
    config: ExperimentConfig,
    dataset: Dataset,
    category: str,
    setting: dict,
    cell_seed: int,
    keep_bank: bool,
) -> CellResult:
    cell = CellResult(
        cell_id=f"{category}/{setting['label']}",
        category=category,
        setting=setting["label"],
        cell_seed=cell_seed,
    )
    try:
        split = _build_split(dataset, category, setting, derive_seed(cell_seed, "protocol"))
        bank = _train_bank(config, split.train, derive_seed(cell_seed, "coreset"))
        state = DetectorState(bank, config.feature, config.b, config.smoothing_sigma)
        image_scores = []
        pixel_maps = []
        for sample in split.test:
            score, pixel_map = state.score_sample(sample)
            image_scores.append(score)
            pixel_maps.append(pixel_map)
        cell.metrics, cell.na_reasons = _cell_metrics(
            config, dataset, category, split.test, image_scores, pixel_maps
        )
        cell.provenance = [p.to_dict() for p in split.provenance]
        cell.info = split.info
        cell.bank_vectors = bank.count
        cell.bank_bytes = bank.count * bank.dim * 4
        if keep_bank:
            cell.bank = bank
        try:
            cell.efficiency = measure_efficiency(state, split.test)
        except ConfigError:
            cell.efficiency = None
    except BenchError as exc:
        cell.status = "failed"
        cell.error = {"code": exc.code, "message": exc.message}
    return cell


def _run_continual_job(
    config: ExperimentConfig,
    dataset: Dataset,
    categories: list[str],
    setting: dict,
    job_seed: int,
    keep_bank: bool,
) -> tuple[list[CellResult], dict | None]:
    order = setting.get("category_order") or categories
    label = setting["label"]
    try:
        sequence = make_continual(dataset, order, derive_seed(job_seed, "protocol"))
    except BenchError as exc:
        failed = [
            CellResult(
                cell_id=f"{c}/{label}",
                category=c,
                setting=label,
                status="failed",
                error={"code": exc.code, "message": exc.message},
                cell_seed=job_seed,
            )
            for c in order
        ]
        return failed, None

    k = len(sequence.tasks)
    cells = []
    try:
        bank = MemoryBank.empty(config.feature.patch_size**2)
        entries: dict[tuple[int, int], float] = {}
        final_scores: dict[int, tuple[list[float], list[np.ndarray]]] = {}
        for step, task in enumerate(sequence.tasks, start=1):
            grids = [extract_features(i.sample.image, config.feature) for i in task.train]
            params = CoresetParams(
                target_fraction=config.coreset_fraction,
                l=config.coreset_l,
                projection_dim=config.projection_dim,
                seed=derive_seed(job_seed, "coreset", step),
            )
            bank = extend_bank_for_task(bank, grids, step, params)
            state = DetectorState(bank, config.feature, config.b, config.smoothing_sigma)
            for prev in sequence.cumulative_test(step):
                scores = []
                maps = []
                for sample in prev.test:
                    score, pixel_map = state.score_sample(sample)
                    scores.append(score)
                    maps.append(pixel_map)
                labels = [s.label == ABNORMAL for s in prev.test]
                entries[(step, prev.index)] = auroc(LabeledScores(scores, labels))
                if step == k:
                    final_scores[prev.index] = (scores, maps)

        fm = forgetting_measure(TaskMatrix(k=k, values=entries))
        state = DetectorState(bank, config.feature, config.b, config.smoothing_sigma)
        for task in sequence.tasks:
            cell = CellResult(
                cell_id=f"{task.category}/{label}",
                category=task.category,
                setting=label,
                cell_seed=job_seed,
            )
            scores, maps = final_scores[task.index]
            cell.metrics, cell.na_reasons = _cell_metrics(
                config, dataset, task.category, task.test, scores, maps
            )
            if "fm" in config.metric_names:
                if task.index in fm.per_task:
                    cell.metrics["fm"] = fm.per_task[task.index]
                    cell.na_reasons.pop("fm", None)
                else:
                    cell.metrics["fm"] = None
                    cell.na_reasons["fm"] = "fm-undefined-for-final-task"
            cell.info = {"task_index": task.index, "steps": k}
            cell.bank_vectors = bank.count
            cell.bank_bytes = bank.count * bank.dim * 4
            if keep_bank:
                cell.bank = bank
            try:
                cell.efficiency = measure_efficiency(state, task.test)
            except ConfigError:
                cell.efficiency = None
            cells.append(cell)
        matrix_doc = {
            "k": k,
            "order": [t.category for t in sequence.tasks],
            "entries": {f"{l},{j}": v for (l, j), v in sorted(entries.items())},
            "fm_per_task": {str(j): v for j, v in sorted(fm.per_task.items())},
            "fm_mean": fm.mean,
        }
        return cells, matrix_doc
    except BenchError as exc:
        failed = [
            CellResult(
                cell_id=f"{c}/{label}",
                category=c,
                setting=label,
                status="failed",
                error={"code": exc.code, "message": exc.message},
                cell_seed=job_seed,
            )
            for c in order
        ]
        return failed, None


# ---------------------------------------------------------------------------
# run orchestration


@dataclass
class RunResult:
    document: dict
    output_dir: str | None
    failures: list[str]

    @property
    def ok(self) -> bool:
        return not self.failures


def _resolve_dataset(config: ExperimentConfig) -> Dataset:
    if config.synth_spec is not None:
        return synth_dataset(config.synth_spec, derive_seed(config.seed, "synth-dataset"))
    return load_dataset(config.dataset_path)


def run_experiment(
    config: ExperimentConfig,
    threads: int = 1,
    save_banks: bool = False,
    output_dir: str | None = None,
) -> RunResult:
    """Execute the full cell matrix and persist results.

    Returns the in-memory results document; cells that fail with a
    package error are recorded (status "failed") without aborting the
    run. Output files land in ``output_dir`` (falling back to the
    config's) unless both are None.
    """
    from .report import write_reports  # local import to avoid a cycle

    dataset = _resolve_dataset(config)
    categories = config.categories or dataset.categories
    for category in categories:
        dataset.require_category(category)

    config_hash = config.config_hash
    hash_seed = int(config_hash[:16], 16)

    jobs = []
    for setting in config.settings:
        if setting["type"] == "continual":
            job_seed = derive_seed(hash_seed, setting["label"])
            jobs.append(("continual", setting, job_seed))
        else:
            for category in categories:
                cell_seed = derive_seed(hash_seed, category, setting["label"])
                jobs.append((category, setting, cell_seed))

    def execute(job) -> tuple[list[CellResult], dict | None]:
        target, setting, seed = job
        if target == "continual":
            return _run_continual_job(
                config, dataset, list(categories), setting, seed, save_banks
            )
        return [
            _run_plain_cell(config, dataset, target, setting, seed, save_banks)
        ], None

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(execute, jobs))
    else:
        outcomes = [execute(job) for job in jobs]

    cells: list[CellResult] = []
    task_matrices: dict[str, dict] = {}
    for (target, setting, _), (job_cells, matrix) in zip(jobs, outcomes):
        cells.extend(job_cells)
        if matrix is not None:
            task_matrices[setting["label"]] = matrix
    cells.sort(key=lambda c: c.cell_id)

    document = _results_document(config, config_hash, cells, task_matrices)
    failures = [c.cell_id for c in cells if c.status == "failed"]

    out_dir = output_dir or config.output_dir
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_reports(document, out_dir)
        if save_banks:
            _save_banks(cells, config.settings, out_dir)
    return RunResult(document=document, output_dir=out_dir, failures=failures)


def _save_banks(cells: list[CellResult], settings: list[dict], out_dir: str) -> None:
    """One snapshot per category, from its first-listed non-continual setting."""
    banks_dir = os.path.join(out_dir, "banks")
    os.makedirs(banks_dir, exist_ok=True)
    setting_rank = {
        s["label"]: i for i, s in enumerate(settings) if s["type"] != "continual"
    }
    best: dict[str, CellResult] = {}
    for cell in cells:
        if cell.bank is None or cell.setting not in setting_rank:
            continue
        current = best.get(cell.category)
        if current is None or setting_rank[cell.setting] < setting_rank[current.setting]:
            best[cell.category] = cell
    for category, cell in sorted(best.items()):
        write_bank_file(cell.bank, os.path.join(banks_dir, f"{category}.iadb"))


def _results_document(
    config: ExperimentConfig,
    config_hash: str,
    cells: list[CellResult],
    task_matrices: dict,
) -> dict:
    cell_docs = []
    timings = {}
    for cell in cells:
        doc = {
            "cell_id": cell.cell_id,
            "category": cell.category,
            "setting": cell.setting,
            "status": cell.status,
            "error": cell.error,
            "metrics": cell.metrics,
            "na_reasons": cell.na_reasons,
            "provenance": cell.provenance,
            "info": cell.info,
            "bank_vectors": cell.bank_vectors,
            "bank_bytes": cell.bank_bytes,
            "cell_seed": cell.cell_seed,
        }
        cell_docs.append(doc)
        if cell.efficiency is not None:
            timings[cell.cell_id] = {
                "latency_ms_mean": cell.efficiency.latency_ms_mean,
                "latency_ms_p50": cell.efficiency.latency_ms_p50,
                "latency_ms_p95": cell.efficiency.latency_ms_p95,
                "peak_rss_bytes": cell.efficiency.peak_rss_bytes,
            }
    return {
        "schema": SCHEMA_VERSION,
        "config": config.canonical,
        "config_hash": config_hash,
        "seed": config.seed,
        "metrics_requested": list(config.metric_names),
        "cells": cell_docs,
        "task_matrices": task_matrices,
        "timings": timings,
    }
