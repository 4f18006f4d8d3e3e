import numpy as np
import pytest

from msuda.metrics import (
    dice, assd, boundary_assd, boundary_mask, surface_mask, grid_diagonal,
    case_metrics, evaluate_dataset, write_report_csv, write_report_markdown,
    METRIC_COLUMNS,
)
from msuda.volume import LabelMap, VolumeError

from oracles import assd_bruteforce, boundary_assd_bruteforce, dice_bruteforce


def _blob(rng, shape=(12, 12, 12), p=0.5):
    from scipy.ndimage import gaussian_filter
    noise = gaussian_filter(rng.normal(size=shape), 1.5)
    return noise > np.quantile(noise, p)


def test_dice_identical_masks():
    m = np.zeros((5, 5, 5), dtype=bool)
    m[1:3, 1:3, 1:3] = True
    assert dice(m, m) == 1.0


def test_dice_hand_count():
    a = np.zeros((4, 4, 4), dtype=bool)
    b = np.zeros((4, 4, 4), dtype=bool)
    a[0, 0, 0] = a[1, 0, 0] = True
    b[1, 0, 0] = b[2, 0, 0] = True
    assert dice(a, b) == 0.5


def test_dice_disjoint_and_empty():
    a = np.zeros((4, 4, 4), dtype=bool)
    b = np.zeros((4, 4, 4), dtype=bool)
    a[0, 0, 0] = True
    b[3, 3, 3] = True
    assert dice(a, b) == 0.0
    assert dice(np.zeros((4, 4, 4), bool), np.zeros((4, 4, 4), bool)) == 1.0


def test_dice_symmetry_and_range():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = _blob(rng)
        b = _blob(rng)
        d1, d2 = dice(a, b), dice(b, a)
        assert d1 == d2
        assert 0.0 <= d1 <= 1.0


def test_assd_identical_zero():
    m = np.zeros((6, 6, 6), dtype=bool)
    m[2:4, 2:4, 2:4] = True
    assert assd(m, m) == 0.0


def test_assd_two_voxels_hand_geometry():
    a = np.zeros((8, 8, 8), dtype=bool)
    b = np.zeros((8, 8, 8), dtype=bool)
    a[2, 4, 4] = True
    b[4, 4, 4] = True
    assert assd(a, b, (1.0, 1.0, 1.0)) == pytest.approx(2.0)
    assert assd(a, b, (0.5, 1.0, 1.0)) == pytest.approx(1.0)


def test_assd_symmetric():
    rng = np.random.default_rng(1)
    for _ in range(10):
        a = _blob(rng)
        b = _blob(rng)
        assert assd(a, b) == pytest.approx(assd(b, a), abs=1e-12)


def test_assd_empty_penalty_is_diagonal():
    a = np.zeros((6, 6, 6), dtype=bool)
    b = np.zeros((6, 6, 6), dtype=bool)
    b[3, 3, 3] = True
    expected = grid_diagonal((6, 6, 6), (1.0, 1.0, 1.0))
    assert assd(a, b) == pytest.approx(expected)
    assert assd(a, a) == 0.0


def test_assd_matches_bruteforce_oracle():
    rng = np.random.default_rng(2)
    spacing = (1.0, 0.8, 1.5)
    for _ in range(25):
        a = _blob(rng, p=rng.uniform(0.4, 0.95))
        b = _blob(rng, p=rng.uniform(0.4, 0.95))
        assert assd(a, b, spacing) == pytest.approx(
            assd_bruteforce(a, b, spacing), abs=1e-9)


def test_surface_mask_definition():
    m = np.zeros((5, 5, 5), dtype=bool)
    m[1:4, 1:4, 1:4] = True
    s = surface_mask(m)
    assert not s[2, 2, 2]  # interior voxel
    assert s[1, 2, 2]
    # border foreground voxels are surface (outside counts as background)
    full = np.ones((3, 3, 3), dtype=bool)
    assert surface_mask(full).sum() == 26  # all but the center voxel
    assert not surface_mask(full)[1, 1, 1]


def test_boundary_mask_and_identical_labels():
    lbl = np.zeros((8, 8, 8), dtype=np.uint8)
    lbl[2:4, 2:6, 2:6] = 1
    lbl[4:6, 2:6, 2:6] = 2
    bm = boundary_mask(lbl)
    assert set(np.argwhere(bm)[:, 0].tolist()) == {3}
    assert boundary_assd(lbl, lbl) == 0.0


def test_boundary_assd_missing_class_penalty():
    ref = np.zeros((8, 8, 8), dtype=np.uint8)
    ref[2:4, 2:6, 2:6] = 1
    ref[4:6, 2:6, 2:6] = 2
    pred = ref.copy()
    pred[pred == 2] = 1  # prediction has no extra-meatal voxels
    expected = grid_diagonal((8, 8, 8), (1.0, 1.0, 1.0))
    assert boundary_assd(pred, ref) == pytest.approx(expected)


def test_boundary_assd_shifted_interface():
    ref = np.zeros((10, 8, 8), dtype=np.uint8)
    ref[2:5, 2:6, 2:6] = 1
    ref[5:8, 2:6, 2:6] = 2
    pred = np.zeros_like(ref)
    pred[2:6, 2:6, 2:6] = 1  # interface moved one voxel along x
    pred[6:8, 2:6, 2:6] = 2
    assert boundary_assd(pred, ref, (1.0, 1.0, 1.0)) == pytest.approx(1.0)
    assert boundary_assd(pred, ref) == pytest.approx(
        boundary_assd_bruteforce(pred, ref, (1.0, 1.0, 1.0)), abs=1e-9)


def test_geometry_mismatch_raises():
    with pytest.raises(VolumeError):
        dice(np.zeros((4, 4, 4), bool), np.zeros((5, 4, 4), bool))
    with pytest.raises(VolumeError):
        assd(np.zeros((4, 4, 4), bool), np.zeros((5, 4, 4), bool))


def _toy_labels(rng):
    lbl = np.zeros((10, 8, 8), dtype=np.uint8)
    lbl[2:4, 2:5, 2:5] = 1
    lbl[4:6, 2:5, 2:5] = 2
    lbl[7:9, 5:7, 3:5] = 3
    noisy = lbl.copy()
    flips = rng.random(lbl.shape) < 0.05
    noisy[flips] = 0
    return lbl, noisy


def test_case_metrics_perfect_case():
    lbl = np.zeros((10, 8, 8), dtype=np.uint8)
    lbl[2:4, 2:5, 2:5] = 1
    lbl[4:6, 2:5, 2:5] = 2
    lbl[7:9, 5:7, 3:5] = 3
    m = case_metrics(lbl, lbl)
    assert m["dice_extra"] == m["dice_intra"] == m["dice_cochlea"] == 1.0
    assert m["assd_extra"] == m["assd_intra"] == m["assd_cochlea"] == 0.0
    assert m["assd_bound"] == 0.0


def test_evaluate_dataset_report_shape(tmp_path):
    rng = np.random.default_rng(3)
    refs, preds = {}, {}
    for i in range(3):
        ref, noisy = _toy_labels(rng)
        refs[f"case{i}"] = LabelMap(ref)
        preds[f"case{i}"] = LabelMap(noisy)
    report = evaluate_dataset(preds, refs)
    assert len(report.rows) == 3
    mean = report.mean_row()
    for k in METRIC_COLUMNS:
        assert mean[k] == pytest.approx(np.mean([r[k] for r in report.rows]))
    write_report_csv(report, tmp_path / "report.csv")
    write_report_markdown(report, tmp_path / "report.md")
    lines = (tmp_path / "report.csv").read_text().strip().splitlines()
    assert len(lines) == 1 + 3 + 1  # header, cases, mean
    assert lines[0].split(",")[1:] == list(METRIC_COLUMNS)
    md = (tmp_path / "report.md").read_text()
    assert md.count("|") > 0 and "mean" in md


def test_evaluate_dataset_id_mismatch():
    with pytest.raises(VolumeError):
        evaluate_dataset({"a": np.zeros((4, 4, 4), np.uint8)},
                         {"b": np.zeros((4, 4, 4), np.uint8)})
