import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from msuda.phantom import (
    PhantomConfig, SiteStyle, generate_dataset, generate_case, iter_case_specs,
    style_signature, SPLIT_SOURCE_TRAIN, SPLIT_TARGET_TRAIN, SPLIT_TARGET_VAL,
)
from msuda.volume import (
    Volume, PreprocessConfig, preprocess_case, load_volume, load_labelmap,
    CLASS_INTRA, CLASS_EXTRA, CLASS_COCHLEA,
)
from scipy.ndimage import label as cc_label


CFG = PhantomConfig(n_source=4, n_target_per_site=2, n_target_val_per_site=1, seed=3)
PP = PreprocessConfig(target_spacing=(1.0, 1.0, 1.0), crop_shape=(64, 48, 16))


def _dataset_hash(root):
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_same_seed_byte_identical(tmp_path):
    d1, d2 = tmp_path / "a", tmp_path / "b"
    generate_dataset(CFG, d1)
    generate_dataset(CFG, d2)
    assert _dataset_hash(d1) == _dataset_hash(d2)


def test_different_seed_differs(tmp_path):
    d1, d2 = tmp_path / "a", tmp_path / "b"
    generate_dataset(CFG, d1)
    generate_dataset(PhantomConfig(n_source=4, n_target_per_site=2,
                                   n_target_val_per_site=1, seed=4), d2)
    assert _dataset_hash(d1) != _dataset_hash(d2)


def test_manifest_lists_all_cases(tmp_path):
    manifest = generate_dataset(CFG, tmp_path)
    n_expected = CFG.n_source + CFG.n_sites * (CFG.n_target_per_site
                                               + CFG.n_target_val_per_site)
    assert len(manifest["cases"]) == n_expected
    splits = {c["split"] for c in manifest["cases"]}
    assert splits == {SPLIT_SOURCE_TRAIN, SPLIT_TARGET_TRAIN, SPLIT_TARGET_VAL}
    # files exist and load
    entry = manifest["cases"][0]
    img = load_volume(tmp_path / entry["image"])
    lbl = load_labelmap(tmp_path / entry["label"])
    assert img.data.shape == CFG.shape
    assert lbl.data.shape == CFG.shape


def test_case_label_invariants():
    for spec in iter_case_specs(CFG):
        case = generate_case(CFG, spec)
        lbl = case.label.data
        tumor = (lbl == CLASS_INTRA) | (lbl == CLASS_EXTRA)
        _, n_tumor = cc_label(tumor, structure=np.ones((3, 3, 3)))
        assert n_tumor == 1
        coch, n_coch = cc_label(lbl == CLASS_COCHLEA, structure=np.ones((3, 3, 3)))
        assert n_coch == 2
        halves = set()
        for k in (1, 2):
            cx = np.argwhere(coch == k)[:, 0].mean()
            halves.add(cx < CFG.shape[0] / 2)
        assert halves == {True, False}
        # landmark is the rounded cochlea centroid
        idx = np.argwhere(lbl == CLASS_COCHLEA)
        assert case.landmark == tuple(int(round(c)) for c in idx.mean(axis=0))


def test_source_intensity_profile():
    # tumor brighter than background, cochlea darker, per construction
    for spec in iter_case_specs(CFG):
        case = generate_case(CFG, spec)
        if case.modality != "source":
            continue
        img, lbl = case.image.data, case.label.data
        vs = (lbl == CLASS_INTRA) | (lbl == CLASS_EXTRA)
        assert img[vs].mean() > img[lbl == 0].mean()
        assert img[lbl == CLASS_COCHLEA].mean() < img[lbl == 0].mean()
        # after standard preprocessing the tumor sits in the bright end
        nimg, nlbl, _ = preprocess_case(case.image, case.label, case.landmark, PP)
        nvs = (nlbl.data == CLASS_INTRA) | (nlbl.data == CLASS_EXTRA)
        assert nimg.data[nvs].mean() >= 0.5


def test_target_intensity_profile_is_opposite():
    for spec in iter_case_specs(CFG):
        case = generate_case(CFG, spec)
        if case.modality != "target":
            continue
        img, lbl = case.image.data, case.label.data
        vs = (lbl == CLASS_INTRA) | (lbl == CLASS_EXTRA)
        assert img[vs].mean() < img[lbl == 0].mean()
        assert img[lbl == CLASS_COCHLEA].mean() > img[lbl == 0].mean()


def test_site_mean_gap_from_emitted_files(tmp_path):
    cfg = PhantomConfig(n_source=1, n_target_per_site=3, n_target_val_per_site=0,
                        seed=9)
    manifest = generate_dataset(cfg, tmp_path)
    means = {}
    for entry in manifest["cases"]:
        if entry["modality"] != "target":
            continue
        img = load_volume(tmp_path / entry["image"])
        means.setdefault(entry["site_id"], []).append(float(img.data.mean()))
    sites = sorted(means)
    gap = cfg.min_bias_gap()
    for i in range(len(sites)):
        for j in range(i + 1, len(sites)):
            diff = abs(np.mean(means[sites[i]]) - np.mean(means[sites[j]]))
            assert diff >= gap, (sites[i], sites[j], diff, gap)


def test_hard_fraction_and_kinds():
    cfg = PhantomConfig(n_source=12, n_target_per_site=1, n_target_val_per_site=0,
                        seed=5, hard_fraction=0.5)
    kinds = set()
    n_hard = 0
    for spec in iter_case_specs(cfg):
        case = generate_case(cfg, spec)
        if case.hard:
            n_hard += 1
            kinds.add(case.hard_kind)
            lbl = case.label.data
            n_i = (lbl == CLASS_INTRA).sum()
            n_e = (lbl == CLASS_EXTRA).sum()
            frac = n_e / (n_i + n_e)
            if case.hard_kind == "tiny_extra":
                assert frac < 0.05
            else:
                assert frac > 0.6
    assert n_hard >= 3
    assert kinds == {"tiny_extra", "large_hetero"}


def test_style_signature_constant_zero():
    sig = style_signature(Volume(np.zeros((6, 6, 6))))
    assert sig.sum() == pytest.approx(1.0)
    assert np.count_nonzero(sig) == 1
    edges = np.linspace(-1.0, 1.0, 33)
    bin_idx = int(np.argmax(sig))
    assert edges[bin_idx] <= 0.0 <= edges[bin_idx + 1]


def test_style_signature_sums_to_one():
    rng = np.random.default_rng(0)
    for _ in range(5):
        v = Volume(rng.uniform(-2, 2, size=(8, 8, 8)).astype(np.float32))
        assert style_signature(v).sum() == pytest.approx(1.0)


def test_same_site_histograms_cluster():
    cfg = PhantomConfig(n_source=1, n_target_per_site=3, n_target_val_per_site=0,
                        seed=11)
    sigs = {}
    for spec in iter_case_specs(cfg):
        case = generate_case(cfg, spec)
        if case.modality != "target":
            continue
        nimg, _, _ = preprocess_case(case.image, case.label, case.landmark, PP)
        sigs.setdefault(case.site_id, []).append(style_signature(nimg))
    mean_sig = {k: np.mean(v, axis=0) for k, v in sigs.items()}
    for site, site_sigs in sigs.items():
        for s in site_sigs:
            d_own = np.abs(s - mean_sig[site]).sum()
            d_others = [np.abs(s - mean_sig[o]).sum() for o in sigs if o != site]
            assert d_own < min(d_others)


def test_config_validation():
    with pytest.raises(ValueError):
        PhantomConfig(n_source=0)
    with pytest.raises(ValueError):
        PhantomConfig(shape=(4, 48, 16))
    with pytest.raises(ValueError):
        PhantomConfig(site_styles=(SiteStyle(noise_sigma=-1.0),) * 3)
