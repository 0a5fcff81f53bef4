from __future__ import annotations

import numpy as np
import pytest

from iadbench.data import PixelMask
from iadbench.errors import MetricError
from iadbench.metrics import (
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
from oracles import (
    ap_stepsum,
    auroc_pairwise,
    flood_fill_regions,
    forgetting_direct,
    region_curve_area,
)


def _random_labeled(rng, max_n=60):
    n = int(rng.integers(2, max_n))
    # quantized scores make ties common
    scores = rng.integers(0, 12, size=n) / 11.0
    labels = rng.random(n) < 0.4
    if not labels.any():
        labels[int(rng.integers(0, n))] = True
    if labels.all():
        labels[int(rng.integers(0, n))] = False
    return scores, labels


# --- auroc --------------------------------------------------------------------


def test_auroc_examples():
    assert auroc(LabeledScores([0.2, 0.8], [False, True])) == 1.0
    assert auroc(LabeledScores([0.5, 0.5], [False, True])) == 0.5
    assert auroc(LabeledScores([0.7, 0.6, 0.1, 0.9], [False, True, False, True])) == 0.75


def test_auroc_matches_pairwise_oracle():
    rng = np.random.default_rng(0)
    for _ in range(80):
        scores, labels = _random_labeled(rng)
        assert auroc(LabeledScores(scores, labels)) == pytest.approx(
            auroc_pairwise(scores.tolist(), labels.tolist()), abs=1e-12
        )


def test_auroc_monotone_invariance():
    rng = np.random.default_rng(1)
    for transform in (lambda x: 0.5 * x + 0.25, np.exp, lambda x: x**3 + x):
        scores, labels = _random_labeled(rng)
        base = auroc(LabeledScores(scores, labels))
        assert auroc(LabeledScores(transform(scores), labels)) == pytest.approx(base, abs=1e-12)


def test_auroc_complement_law():
    rng = np.random.default_rng(2)
    for _ in range(20):
        n = int(rng.integers(4, 40))
        scores = rng.permutation(n) / n  # tie-free
        labels = rng.random(n) < 0.5
        if labels.all() or not labels.any():
            continue
        a = auroc(LabeledScores(scores, labels))
        b = auroc(LabeledScores(scores, ~labels))
        assert a + b == pytest.approx(1.0, abs=1e-12)


def test_auroc_degenerate_labels():
    with pytest.raises(MetricError) as exc:
        auroc(LabeledScores([0.1, 0.2], [True, True]))
    assert exc.value.code == "degenerate-labels"


# --- average precision ----------------------------------------------------------


def test_ap_examples():
    assert average_precision(LabeledScores([0.9, 0.1], [True, False])) == 1.0
    assert average_precision(LabeledScores([0.1, 0.9], [True, False])) == 0.5
    assert average_precision(LabeledScores([0.3, 0.7, 0.5], [True, True, True])) == 1.0


def test_ap_matches_stepsum_oracle():
    rng = np.random.default_rng(3)
    for _ in range(80):
        scores, labels = _random_labeled(rng)
        assert average_precision(LabeledScores(scores, labels)) == pytest.approx(
            ap_stepsum(scores.tolist(), labels.tolist()), abs=1e-12
        )


def test_ap_no_positives():
    with pytest.raises(MetricError) as exc:
        average_precision(LabeledScores([0.1], [False]))
    assert exc.value.code == "no-positives"


# --- connected regions -----------------------------------------------------------


def test_regions_empty_mask():
    assert connected_regions(PixelMask(np.zeros((4, 4), bool))).regions == []


def test_regions_single_pixel():
    mask = np.zeros((4, 4), bool)
    mask[1, 2] = True
    rset = connected_regions(PixelMask(mask))
    assert len(rset.regions) == 1
    assert rset.regions[0].area == 1
    assert rset.regions[0].saturation == 1


def test_regions_diagonal_touch_is_one_region():
    mask = np.zeros((4, 4), bool)
    mask[0, 0] = mask[1, 1] = True
    assert len(connected_regions(PixelMask(mask)).regions) == 1


def test_regions_match_flood_fill_oracle():
    rng = np.random.default_rng(4)
    for _ in range(30):
        mask = rng.random((10, 10)) < 0.3
        ours = connected_regions(PixelMask(mask))
        reference = flood_fill_regions(mask.tolist())
        assert len(ours.regions) == len(reference)
        ours_sets = {frozenset(r.pixels.tolist()) for r in ours.regions}
        ref_sets = {
            frozenset(y * 10 + x for (y, x) in pixels) for pixels in reference
        }
        assert ours_sets == ref_sets


def test_region_saturation_modes():
    mask = np.zeros((10, 10), bool)
    mask[0:2, 0:4] = True  # area 8
    by_count = connected_regions(PixelMask(mask), saturation=4)
    assert by_count.regions[0].saturation == 4
    by_rel = connected_regions(PixelMask(mask), saturation=0.05)  # 5 px of 100
    assert by_rel.regions[0].saturation == 5
    clamped = connected_regions(PixelMask(mask), saturation=0.5)  # 50 px > area
    assert clamped.regions[0].saturation == 8
    floor = connected_regions(PixelMask(mask), saturation=0.001)
    assert floor.regions[0].saturation == 1


# --- aupro / mean_spro -------------------------------------------------------------


def _one_region_mask(h=8, w=8):
    mask = np.zeros((h, w), bool)
    mask[2:4, 2:6] = True  # area 8
    return mask


def test_aupro_perfect_and_anti():
    mask = _one_region_mask()
    perfect = mask.astype(float)
    assert aupro([perfect], [PixelMask(mask)], 0.3) == pytest.approx(1.0, abs=1e-12)
    assert aupro([perfect], [PixelMask(mask)], 0.07) == pytest.approx(1.0, abs=1e-12)
    assert aupro([1.0 - perfect], [PixelMask(mask)], 0.3) == pytest.approx(0.0, abs=1e-12)


def test_aupro_constant_map():
    mask = _one_region_mask()
    constant = np.full(mask.shape, 0.42)
    assert aupro([constant], [PixelMask(mask)], 0.3) == pytest.approx(0.15, abs=1e-9)


def test_spro_saturated_half_coverage():
    """Covering s of |A| pixels at zero FPR already saturates the region."""
    mask = _one_region_mask()  # area 8
    smap = np.zeros(mask.shape)
    covered = np.argwhere(mask)[:4]
    smap[covered[:, 0], covered[:, 1]] = 1.0
    rset = connected_regions(PixelMask(mask), saturation=4)
    assert mean_spro([smap], [rset], 0.3) == pytest.approx(1.0, abs=1e-12)


def test_spro_reduces_to_aupro():
    rng = np.random.default_rng(5)
    for _ in range(25):
        mask = rng.random((12, 12)) < 0.2
        if not mask.any():
            mask[3, 3] = True
        smap = rng.random((12, 12))
        rset = connected_regions(PixelMask(mask))  # saturations = region areas
        for limit in (0.05, 0.3, 1.0):
            assert mean_spro([smap], [rset], limit) == aupro(
                [smap], [PixelMask(mask)], limit
            )


def test_region_curve_matches_bruteforce_oracle():
    rng = np.random.default_rng(6)
    for _ in range(20):
        n_images = int(rng.integers(1, 3))
        maps, masks = [], []
        for _ in range(n_images):
            mask = rng.random((9, 9)) < 0.25
            maps.append(rng.integers(0, 20, size=(9, 9)) / 19.0)
            masks.append(mask)
        if not any(m.any() for m in masks):
            masks[0][4, 4] = True
        ours = aupro([m for m in maps], [PixelMask(m) for m in masks], 0.3)
        reference = region_curve_area(
            [m.tolist() for m in maps], [m.tolist() for m in masks], 0.3
        )
        assert ours == pytest.approx(reference, abs=1e-9)


def test_curve_requires_regions_and_normals():
    smap = np.random.default_rng(0).random((4, 4))
    with pytest.raises(MetricError) as exc:
        aupro([smap], [PixelMask(np.zeros((4, 4), bool))], 0.3)
    assert exc.value.code == "no-regions"
    with pytest.raises(MetricError) as exc:
        aupro([smap], [PixelMask(np.ones((4, 4), bool))], 0.3)
    assert exc.value.code == "no-normal-pixels"


def test_curve_monotonicity():
    """PRO and FPR are nonincreasing in the threshold."""
    rng = np.random.default_rng(7)
    mask = rng.random((10, 10)) < 0.3
    if not mask.any():
        mask[0, 0] = True
    smap = rng.random((10, 10))
    flat = np.sort(np.unique(smap))[::-1]
    normal = ~mask
    prev_fpr, prev_pro = -1.0, -1.0
    regions = flood_fill_regions(mask.tolist())
    for t in flat:
        predicted = smap >= t
        fpr = float((predicted & normal).sum() / normal.sum())
        pro = float(
            np.mean(
                [
                    sum(1 for (y, x) in px if predicted[y, x]) / len(px)
                    for px in regions
                ]
            )
        )
        assert fpr >= prev_fpr and pro >= prev_pro
        prev_fpr, prev_pro = fpr, pro


def test_pixel_pooling_permutation_invariance():
    rng = np.random.default_rng(8)
    maps = [rng.random((6, 6)) for _ in range(4)]
    masks = [PixelMask(rng.random((6, 6)) < 0.3) for _ in range(3)] + [None]
    if not any(m is not None and m.any() for m in masks):
        masks[0] = PixelMask(np.eye(6, dtype=bool))
    base = auroc(pooled_pixel_scores(maps, masks))
    order = [2, 0, 3, 1]
    shuffled = auroc(
        pooled_pixel_scores([maps[i] for i in order], [masks[i] for i in order])
    )
    assert base == shuffled


# --- forgetting measure -------------------------------------------------------------


def test_fm_direct_substitution():
    result = forgetting_measure(TaskMatrix(2, {(1, 1): 0.9, (2, 1): 0.7, (2, 2): 0.8}))
    assert result.per_task[1] == pytest.approx(0.2)


def test_fm_negative_on_improvement():
    result = forgetting_measure(TaskMatrix(2, {(1, 1): 0.5, (2, 1): 0.6, (2, 2): 0.8}))
    assert result.per_task[1] == pytest.approx(-0.1)


def test_fm_three_step_example():
    entries = {(1, 1): 0.8, (2, 1): 0.6, (2, 2): 0.9, (3, 1): 0.7, (3, 2): 0.85, (3, 3): 0.5}
    result = forgetting_measure(TaskMatrix(3, entries))
    assert result.per_task[1] == pytest.approx(0.1)
    assert result.per_task[2] == pytest.approx(0.05)
    assert result.mean == pytest.approx(0.075)


def test_fm_matches_direct_oracle_and_range():
    rng = np.random.default_rng(9)
    for _ in range(30):
        k = int(rng.integers(2, 6))
        entries = {
            (l, j): float(rng.random()) for l in range(1, k + 1) for j in range(1, l + 1)
        }
        result = forgetting_measure(TaskMatrix(k, entries))
        per_task, mean = forgetting_direct(entries, k)
        assert result.per_task == pytest.approx(per_task)
        assert result.mean == pytest.approx(mean)
        assert all(-1.0 <= v <= 1.0 for v in result.per_task.values())


def test_fm_errors():
    with pytest.raises(MetricError) as exc:
        forgetting_measure(TaskMatrix(1, {(1, 1): 0.5}))
    assert exc.value.code == "single-task"
    with pytest.raises(MetricError) as exc:
        forgetting_measure(TaskMatrix(2, {(1, 1): 0.5, (2, 2): 0.5}))
    assert exc.value.code == "incomplete-matrix"
    with pytest.raises(MetricError):
        TaskMatrix(2, {(1, 2): 0.5})  # upper triangle
