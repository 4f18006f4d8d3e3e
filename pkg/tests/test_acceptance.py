"""Acceptance suite: every criterion at its stated tolerance.

Each criterion prints one `[acceptance] criterion N (...): PASS/FAIL`
line (visible with `pytest -s` or on failure). The end-to-end criteria
train the full pipeline on the phantom for three seeds plus a
bit-identical rerun; the whole module takes roughly 45-60 minutes on one
CPU core.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from msuda import pipeline
from msuda.config import desk_config, apply_overrides
from msuda.intensity import label_assisted_transform
from msuda.metrics import dice, assd, boundary_assd
from msuda.nets import SiteController, ProjectionHead, dynamic_instance_norm
from msuda.phantom import style_signature
from msuda.segmentation import SegConfig, SegMemberSpec, predict, load_seg_checkpoint
from msuda.selftrain import filter_pseudo_label
from msuda.synthesis import (
    GeneratorConfig, edge_loss, dice_ce_loss, qs_attn_nce, lr_for_epoch,
)
from msuda.volume import (
    Volume, PreprocessConfig, normalize, load_volume, load_labelmap,
)

from gradcheck import central_difference_check
from oracles import (
    filter_verdict_bruteforce, dice_bruteforce, assd_bruteforce,
    boundary_assd_bruteforce,
)

E2E_SEEDS = (0, 1, 2)
RUNTIME_LIMIT_S = 45 * 60


def _report(num, name, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    print(f"[acceptance] criterion {num} ({name}): {status} {detail}")
    assert ok, f"criterion {num} ({name}) failed: {detail}"


# ---------------------------------------------------------------------------
# criterion 1: pseudo-label filter vs flood-fill oracle
# ---------------------------------------------------------------------------

def test_criterion_1_filter_oracle_equivalence():
    rng = np.random.default_rng(20240001)
    t0 = time.monotonic()
    mismatches = 0
    for _ in range(1000):
        shape = tuple(int(rng.integers(3, 9)) for _ in range(3))
        lbl = np.zeros(shape, dtype=np.uint8)
        tumor = rng.random(shape) < rng.uniform(0.02, 0.35)
        lbl[tumor] = rng.integers(1, 3, size=int(tumor.sum()))
        coch = (rng.random(shape) < 0.05) & (lbl == 0)
        lbl[coch] = 3
        got = filter_pseudo_label(lbl)[:2]
        want = filter_verdict_bruteforce(lbl)
        if got != want:
            mismatches += 1
    elapsed = time.monotonic() - t0
    _report(1, "filter oracle", mismatches == 0 and elapsed < 10.0,
            f"mismatches={mismatches}/1000, runtime={elapsed:.1f}s (limit 10s)")


# ---------------------------------------------------------------------------
# criterion 2: metric oracles
# ---------------------------------------------------------------------------

def test_criterion_2_metric_oracle_equivalence():
    from scipy.ndimage import gaussian_filter
    rng = np.random.default_rng(20240002)
    spacing = (1.0, 0.75, 1.5)
    t0 = time.monotonic()
    worst_assd = worst_bound = worst_dice = 0.0
    for _ in range(200):
        labels = []
        for _ in range(2):
            lbl = np.zeros((16, 16, 16), dtype=np.uint8)
            blob = gaussian_filter(rng.normal(size=(16, 16, 16)), 1.5)
            tumor = blob > np.quantile(blob, rng.uniform(0.55, 0.97))
            lbl[tumor] = 1
            lbl[tumor & (np.arange(16)[:, None, None] >
                         rng.integers(4, 12))] = 2
            coch = gaussian_filter(rng.normal(size=(16, 16, 16)), 1.0) > 1.2
            lbl[coch & (lbl == 0)] = 3
            labels.append(lbl)
        a, b = labels
        for cls in (1, 2, 3):
            ma, mb = a == cls, b == cls
            worst_dice = max(worst_dice, abs(dice(ma, mb)
                                             - dice_bruteforce(ma, mb)))
            worst_assd = max(worst_assd, abs(assd(ma, mb, spacing)
                                             - assd_bruteforce(ma, mb, spacing)))
        worst_bound = max(worst_bound, abs(
            boundary_assd(a, b, spacing) - boundary_assd_bruteforce(a, b, spacing)))
    elapsed = time.monotonic() - t0
    ok = worst_dice == 0.0 and worst_assd < 1e-9 and worst_bound < 1e-9 \
        and elapsed < 60.0
    _report(2, "metric oracles", ok,
            f"dice diff={worst_dice:.2g}, assd diff={worst_assd:.2g}, "
            f"boundary diff={worst_bound:.2g}, runtime={elapsed:.1f}s (limit 60s)")


# ---------------------------------------------------------------------------
# criterion 3: exact unit values
# ---------------------------------------------------------------------------

def test_criterion_3_exact_unit_values():
    problems = []

    # label-assisted transform: cochlea -> 1.0 exactly, tumor shift mu+0.5
    rng = np.random.default_rng(3)
    img = rng.uniform(-0.2, 0.4, size=(8, 8, 8)).astype(np.float32)
    lbl = np.zeros((8, 8, 8), dtype=np.uint8)
    lbl[1:4, 1:4, 1:4] = 1
    lbl[4:6, 1:4, 1:4] = 2
    lbl[6:8, 6:8, 6:8] = 3
    vs = (lbl == 1) | (lbl == 2)
    mu = img[vs].mean()
    out = label_assisted_transform(img, lbl, clamp_range=None)
    if not np.all(out[lbl == 3] == 1.0):
        problems.append("cochlea voxels not exactly 1.0")
    if not np.allclose(img[vs] - out[vs], mu + 0.5, atol=1e-6):
        problems.append("tumor shift is not mu+0.5")

    # controller affinity at 32-bit within 1e-6
    torch.manual_seed(0)
    ctrl = SiteController(3, 16)
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(50):
        c1 = torch.rand(3)
        c2 = torch.rand(3)
        alpha = float(rng.uniform())
        with torch.no_grad():
            g1, b1 = ctrl(c1)
            g2, b2 = ctrl(c2)
            gm, bm = ctrl(alpha * c1 + (1 - alpha) * c2)
        err_g = (gm - (alpha * g1 + (1 - alpha) * g2)).abs().max()
        err_b = (bm - (alpha * b1 + (1 - alpha) * b2)).abs().max()
        worst = max(worst, float(err_g), float(err_b))
    if worst > 1e-6:
        problems.append(f"controller affinity error {worst:.2g} > 1e-6")

    # normalize range contract
    v = Volume(np.random.default_rng(5).normal(3, 10, size=(12, 10, 8))
               .astype(np.float32))
    w = normalize(v, PreprocessConfig())
    if not (w.data.min() >= -1.0 - 1e-6 and abs(w.data.max() - 1.0) < 1e-6):
        problems.append("normalize range contract violated")

    # lr schedule midpoint
    cfg = GeneratorConfig(epochs_flat=400, epochs_decay=400)
    mid = lr_for_epoch(cfg, 400 + 200)
    if abs(mid - cfg.lr / 2) > 1e-12:
        problems.append(f"lr midpoint {mid} != lr0/2")

    # ensemble mean example: (0.2,0.8) & (0.6,0.4) -> (0.4,0.6), argmax 1
    class ConstNet(torch.nn.Module):
        def __init__(self, probs):
            super().__init__()
            self.register_buffer("logits",
                                 torch.log(torch.tensor(probs) + 1e-30))

        def forward(self, x):
            b, _, nx, ny, nz = x.shape
            return self.logits.reshape(1, 4, 1, 1, 1).expand(b, 4, nx, ny, nz)

    seg_cfg = SegConfig(patch_shape=(8, 8, 8), ensemble_size=2,
                        members=[SegMemberSpec(seed=0), SegMemberSpec(seed=1)])
    pred = predict(np.zeros((8, 8, 8), dtype=np.float32),
                   [ConstNet([0.2, 0.8, 0.0, 0.0]), ConstNet([0.6, 0.4, 0.0, 0.0])],
                   seg_cfg)
    if not (np.allclose(pred.probabilities[0], 0.4, atol=1e-6)
            and np.allclose(pred.probabilities[1], 0.6, atol=1e-6)
            and np.all(pred.label.data == 1)):
        problems.append("ensemble mean example wrong")

    _report(3, "exact unit values", not problems, "; ".join(problems) or
            "transform, controller affinity, normalize, lr midpoint, ensemble mean")


# ---------------------------------------------------------------------------
# criterion 4: gradient checks at 64-bit on <=6^3 toys
# ---------------------------------------------------------------------------

def test_criterion_4_gradient_checks():
    t0 = time.monotonic()
    worst = {}

    torch.manual_seed(41)
    ctrl = SiteController(3, 2).double()
    x = torch.randn(1, 2, 6, 6, 6, dtype=torch.float64, requires_grad=True)
    code = torch.tensor([0.2, 0.5, 0.3], dtype=torch.float64)
    target = torch.randn(1, 2, 6, 6, 6, dtype=torch.float64)

    def din_loss():
        gamma, beta = ctrl(code)
        return (dynamic_instance_norm(x, gamma, beta) - target).pow(2).mean()

    worst["din"] = central_difference_check(
        din_loss, [x] + list(ctrl.parameters()), rtol=1e-3, max_entries=30)

    torch.manual_seed(42)
    a = torch.randn(1, 1, 6, 6, 6, dtype=torch.float64, requires_grad=True)
    b = torch.randn(1, 1, 6, 6, 6, dtype=torch.float64, requires_grad=True)
    worst["edge"] = central_difference_check(
        lambda: edge_loss(a, b), [a, b], rtol=1e-3, max_entries=40)

    torch.manual_seed(43)
    heads = torch.nn.ModuleList([ProjectionHead(2, 8)]).double()
    fr = torch.randn(1, 2, 6, 6, 6, dtype=torch.float64, requires_grad=True)
    ff = torch.randn(1, 2, 6, 6, 6, dtype=torch.float64, requires_grad=True)

    def nce_loss():
        rng = np.random.default_rng(7)
        return qs_attn_nce([fr], [ff], heads, rng, n_locations=48, n_keep=24)

    worst["contrastive"] = central_difference_check(
        nce_loss, [fr, ff] + list(heads.parameters()), rtol=1e-3, max_entries=25)

    torch.manual_seed(44)
    logits = torch.randn(1, 4, 6, 6, 6, dtype=torch.float64, requires_grad=True)
    target_cls = torch.randint(0, 4, (1, 6, 6, 6))
    worst["dice_ce"] = central_difference_check(
        lambda: dice_ce_loss(logits, target_cls), [logits], rtol=1e-3,
        max_entries=40)

    elapsed = time.monotonic() - t0
    detail = ", ".join(f"{k} rel err {v:.2g}" for k, v in worst.items())
    _report(4, "gradient checks", elapsed < 120.0,
            f"{detail}, runtime={elapsed:.1f}s (limit 120s)")


# ---------------------------------------------------------------------------
# end-to-end phantom adaptation (criteria 5-8)
# ---------------------------------------------------------------------------

def _vs_union_dice(pred_dir, pred_manifest, prep_dir, prep_manifest, split):
    ref_by_id = {c["case_id"]: c for c in prep_manifest["cases"]
                 if c["split"] == split}
    scores = []
    for entry in pred_manifest["cases"]:
        ref = load_labelmap(prep_dir / ref_by_id[entry["case_id"]]["label"])
        pred = load_labelmap(pred_dir / entry["label"])
        scores.append(dice((pred.data == 1) | (pred.data == 2),
                           (ref.data == 1) | (ref.data == 2)))
    return float(np.mean(scores))


def _vs_union_dice_from_models(models, cfg, prep_dir, prep_manifest, split):
    scores = []
    for case in prep_manifest["cases"]:
        if case["split"] != split:
            continue
        img = load_volume(prep_dir / case["image"])
        ref = load_labelmap(prep_dir / case["label"])
        pred = predict(img, models, cfg.segmentation, case_id=case["case_id"])
        scores.append(dice((pred.label.data == 1) | (pred.label.data == 2),
                           (ref.data == 1) | (ref.data == 2)))
    return float(np.mean(scores))


def _load_manifest(cfg, work, stage):
    path = pipeline.stage_dir(cfg, work, stage) / "manifest.json"
    return json.loads(path.read_text()), path.parent


@pytest.fixture(scope="session")
def e2e(tmp_path_factory):
    """Full pipeline for three seeds plus the no-adaptation baselines."""
    work = Path(tmp_path_factory.mktemp("acceptance_work"))
    results = {}
    for seed in E2E_SEEDS:
        cfg = apply_overrides(desk_config(), [("seed", seed)])
        t0 = time.monotonic()
        pipeline.run_all(cfg, work)
        elapsed = time.monotonic() - t0

        base_cfg = apply_overrides(cfg, [("train_on", "source"),
                                         ("predict_model_stage", "train-seg")])
        for stage in (pipeline.STAGE_PHANTOM, pipeline.STAGE_PREPROCESS,
                      pipeline.STAGE_TRAIN_SEG, pipeline.STAGE_PREDICT,
                      pipeline.STAGE_EVALUATE):
            pipeline.STAGE_RUNNERS[stage](base_cfg, work)

        prep_manifest, prep_dir = _load_manifest(cfg, work, "preprocess")
        pred_manifest, pred_dir = _load_manifest(cfg, work, "predict")
        final_dice = _vs_union_dice(pred_dir, pred_manifest, prep_dir,
                                    prep_manifest, cfg.predict_split)

        seg_manifest, seg_dir = _load_manifest(cfg, work, "train-seg")
        round0_models = [load_seg_checkpoint(seg_dir / m["checkpoint"])[0]
                         for m in seg_manifest["members"]]
        round0_dice = _vs_union_dice_from_models(
            round0_models, cfg, prep_dir, prep_manifest, cfg.predict_split)

        bpred_manifest, bpred_dir = _load_manifest(base_cfg, work, "predict")
        bprep_manifest, bprep_dir = _load_manifest(base_cfg, work, "preprocess")
        baseline_dice = _vs_union_dice(bpred_dir, bpred_manifest, bprep_dir,
                                       bprep_manifest, cfg.predict_split)

        results[seed] = {
            "cfg": cfg,
            "elapsed": elapsed,
            "final": final_dice,
            "round0": round0_dice,
            "baseline": baseline_dice,
        }
        print(f"[acceptance] e2e seed {seed}: baseline={baseline_dice:.3f} "
              f"round0={round0_dice:.3f} final={final_dice:.3f} "
              f"runtime={elapsed / 60:.1f} min")
    return work, results


def test_criterion_5_phantom_adaptation(e2e):
    work, results = e2e
    passes = []
    details = []
    for seed, r in results.items():
        gain_ok = r["final"] - r["baseline"] >= 0.15
        st_ok = r["final"] >= r["round0"] - 0.02
        time_ok = r["elapsed"] <= RUNTIME_LIMIT_S
        passes.append(gain_ok and st_ok and time_ok)
        details.append(
            f"seed {seed}: gain {r['final'] - r['baseline']:+.3f} "
            f"(need >=0.15) {'ok' if gain_ok else 'FAIL'}, "
            f"self-train {r['final'] - r['round0']:+.3f} (need >=-0.02) "
            f"{'ok' if st_ok else 'FAIL'}, {r['elapsed'] / 60:.1f} min")
    n_pass = sum(passes)
    _report(5, "phantom adaptation", n_pass >= 2,
            f"{n_pass}/3 seeds pass; " + "; ".join(details))


def test_criterion_6_site_style_fidelity(e2e):
    work, results = e2e
    cfg = results[E2E_SEEDS[0]]["cfg"]
    prep_manifest, prep_dir = _load_manifest(cfg, work, "preprocess")
    trans_manifest, trans_dir = _load_manifest(cfg, work, "translate")
    sites = prep_manifest["sites"]

    real_sigs = {s: [] for s in sites}
    for case in prep_manifest["cases"]:
        if case["modality"] == "target":
            img = load_volume(prep_dir / case["image"])
            real_sigs[case["site_id"]].append(style_signature(img))
    synth_sigs = {s: [] for s in sites}
    for case in trans_manifest["cases"]:
        img = load_volume(trans_dir / case["image"])
        synth_sigs[case["site_id"]].append(style_signature(img))

    wins = 0
    details = []
    for site in sites:
        dists = {}
        for other in sites:
            pairs = [np.abs(s - r).sum()
                     for s in synth_sigs[site] for r in real_sigs[other]]
            dists[other] = float(np.mean(pairs))
        d_own = dists[site]
        d_best_other = min(v for k, v in dists.items() if k != site)
        win = d_own < d_best_other
        wins += win
        details.append(f"{site}: own={d_own:.3f} other_min={d_best_other:.3f} "
                       f"{'ok' if win else 'FAIL'}")
    _report(6, "site-style fidelity", wins >= 2,
            f"{wins}/3 sites; " + "; ".join(details))


def test_criterion_7_determinism(e2e, tmp_path_factory):
    work, results = e2e
    cfg = results[E2E_SEEDS[0]]["cfg"]
    rerun_work = Path(tmp_path_factory.mktemp("acceptance_rerun"))
    pipeline.run_all(cfg, rerun_work)
    original = (pipeline.stage_dir(cfg, work, "evaluate") / "report.csv").read_bytes()
    rerun = (pipeline.stage_dir(cfg, rerun_work, "evaluate")
             / "report.csv").read_bytes()
    md_a = (pipeline.stage_dir(cfg, work, "evaluate") / "report.md").read_bytes()
    md_b = (pipeline.stage_dir(cfg, rerun_work, "evaluate") / "report.md").read_bytes()
    ok = original == rerun and md_a == md_b
    _report(7, "determinism", ok,
            f"report.csv bytes {'identical' if original == rerun else 'DIFFER'} "
            f"across independent work dirs")


def test_criterion_8_filter_manifest_audit(e2e):
    work, results = e2e
    problems = []
    for seed, r in results.items():
        audit = pipeline.run_audit(r["cfg"], work)
        if not audit["ok"]:
            problems.append(f"seed {seed}: {audit['problems']}")
        st_manifest, _ = _load_manifest(r["cfg"], work, "self-train")
        if len(st_manifest["rounds"]) != r["cfg"].self_training.rounds:
            problems.append(f"seed {seed}: rounds missing")
        for rnd in st_manifest["rounds"]:
            leaked = set(rnd["unreliable_ids"]) & set(rnd["train_case_ids"])
            if leaked:
                problems.append(f"seed {seed} round {rnd['round']}: {leaked}")
    _report(8, "filter/manifest audit", not problems,
            "; ".join(problems) or
            f"audits clean across {len(results)} seeds x 2 rounds")
