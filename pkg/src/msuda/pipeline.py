"""Stage-based orchestration of the full adaptation pipeline.

Each stage writes into work_dir/<stage>/<run-id>/ where the run id hashes
the configuration and seed. A stage manifest echoes the configuration and
records the sha256 of every upstream manifest it consumed, so the whole
chain can be audited. Stages are idempotent: rerunning with the same
configuration and seed rewrites identical bytes.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from pathlib import Path

import numpy as np

from . import metrics as metrics_mod
from .config import PipelineConfig, ConfigError
from .intensity import AugmentConfig
from .oversample import (
    select_hard_samples, generate_unseen_codes, oversample as oversample_cases,
)
from .phantom import generate_dataset
from .segmentation import (
    SegConfig, train_segmenter, predict, save_seg_checkpoint, load_seg_checkpoint,
)
from .selftrain import make_record
from .synthesis import (
    train_synthesis, translate, load_checkpoint, one_hot_code,
)
from .volume import (
    Volume, LabelMap, load_volume, load_labelmap, save_volume, save_labelmap,
    preprocess_case,
)

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"

STAGE_PHANTOM = "phantom"
STAGE_PREPROCESS = "preprocess"
STAGE_TRAIN_SYNTH = "train-synth"
STAGE_TRANSLATE = "translate"
STAGE_OVERSAMPLE = "oversample"
STAGE_TRAIN_SEG = "train-seg"
STAGE_SELF_TRAIN = "self-train"
STAGE_PREDICT = "predict"
STAGE_EVALUATE = "evaluate"
STAGE_REPORT = "report"

STAGES = (STAGE_PHANTOM, STAGE_PREPROCESS, STAGE_TRAIN_SYNTH, STAGE_TRANSLATE,
          STAGE_OVERSAMPLE, STAGE_TRAIN_SEG, STAGE_SELF_TRAIN, STAGE_PREDICT,
          STAGE_EVALUATE, STAGE_REPORT)

_STAGE_ORDINAL = {name: i for i, name in enumerate(STAGES)}


class PipelineError(RuntimeError):
    def __init__(self, message, stage=None):
        super().__init__(message)
        self.stage = stage


class MissingStageError(PipelineError):
    def __init__(self, stage):
        super().__init__(
            f"missing upstream artifacts: run the {stage!r} stage first", stage)


def stage_dir(cfg: PipelineConfig, work_dir, stage: str) -> Path:
    return Path(work_dir) / stage / cfg.run_id()


def _sha256(path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def _stage_seed(cfg: PipelineConfig, stage: str, *extra) -> int:
    ss = np.random.SeedSequence([int(cfg.seed), _STAGE_ORDINAL[stage]]
                                + [int(e) for e in extra])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def _write_manifest(out_dir: Path, stage: str, cfg: PipelineConfig,
                    inputs: dict, payload: dict) -> Path:
    manifest = {
        "stage": stage,
        "run_id": cfg.run_id(),
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "inputs": {name: {"manifest": str(Path(p).name),
                          "stage_dir": str(Path(p).parent.name),
                          "sha256": _sha256(p)}
                   for name, p in inputs.items()},
    }
    manifest.update(payload)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / MANIFEST
    with open(path, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    return path


def _require_manifest(cfg: PipelineConfig, work_dir, stage: str):
    path = stage_dir(cfg, work_dir, stage) / MANIFEST
    if not path.exists():
        raise MissingStageError(stage)
    with open(path) as f:
        return json.load(f), path


def _cases_by_split(manifest, split):
    return [c for c in manifest["cases"] if c["split"] == split]


def _load_pair(case, root):
    img = load_volume(Path(root) / case["image"])
    lbl = load_labelmap(Path(root) / case["label"])
    return img, lbl


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def run_phantom(cfg: PipelineConfig, work_dir) -> Path:
    out = stage_dir(cfg, work_dir, STAGE_PHANTOM)
    phantom_cfg = dataclasses.replace(
        cfg.phantom, seed=_stage_seed(cfg, STAGE_PHANTOM, cfg.phantom.seed))
    manifest = generate_dataset(phantom_cfg, out)
    return _write_manifest(out, STAGE_PHANTOM, cfg, {}, {
        "cases": manifest["cases"],
        "sites": manifest["sites"],
    })


def run_preprocess(cfg: PipelineConfig, work_dir) -> Path:
    upstream, upstream_path = _require_manifest(cfg, work_dir, STAGE_PHANTOM)
    src_root = upstream_path.parent
    out = stage_dir(cfg, work_dir, STAGE_PREPROCESS)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for case in upstream["cases"]:
        img, lbl = _load_pair(case, src_root)
        landmark = tuple(case["landmark"]) if case.get("landmark") else None
        p_img, p_lbl, p_lm = preprocess_case(img, lbl, landmark, cfg.preprocess)
        img_rel = f"{case['case_id']}_img"
        lbl_rel = f"{case['case_id']}_lbl"
        save_volume(p_img, out / img_rel)
        save_labelmap(p_lbl, out / lbl_rel)
        entry = dict(case)
        entry.update({"image": img_rel, "label": lbl_rel, "landmark": list(p_lm)})
        entries.append(entry)
    return _write_manifest(out, STAGE_PREPROCESS, cfg,
                           {STAGE_PHANTOM: upstream_path},
                           {"cases": entries, "sites": upstream["sites"]})


def _synth_training_lists(cfg, manifest, root):
    sites = manifest["sites"]
    if len(sites) != cfg.synthesis.code_dim:
        raise ConfigError(
            f"synthesis.code_dim={cfg.synthesis.code_dim} but the dataset "
            f"has {len(sites)} sites")
    sources, targets = [], []
    for case in sorted(_cases_by_split(manifest, "source-train"),
                       key=lambda c: c["case_id"]):
        sources.append(_load_pair(case, root))
    for case in sorted(_cases_by_split(manifest, "target-train"),
                       key=lambda c: c["case_id"]):
        img = load_volume(Path(root) / case["image"])
        targets.append((img, sites.index(case["site_id"])))
    return sources, targets


def run_train_synth(cfg: PipelineConfig, work_dir) -> Path:
    upstream, upstream_path = _require_manifest(cfg, work_dir, STAGE_PREPROCESS)
    root = upstream_path.parent
    sources, targets = _synth_training_lists(cfg, upstream, root)
    if not sources or not targets:
        raise PipelineError("preprocessed dataset has no training cases",
                            STAGE_TRAIN_SYNTH)
    out = stage_dir(cfg, work_dir, STAGE_TRAIN_SYNTH)
    seed = _stage_seed(cfg, STAGE_TRAIN_SYNTH)
    _, history = train_synthesis(sources, targets, cfg.synthesis, seed=seed,
                                 out_dir=out)
    final_epoch = cfg.synthesis.epochs_flat + cfg.synthesis.epochs_decay - 1
    g_final = [v for e, t, v in history if t == "g_total" and e == final_epoch]
    return _write_manifest(out, STAGE_TRAIN_SYNTH, cfg,
                           {STAGE_PREPROCESS: upstream_path}, {
                               "checkpoint": "checkpoint_final.pt",
                               "loss_trace": "loss_trace.csv",
                               "n_source": len(sources),
                               "n_target": len(targets),
                               "final_generator_loss": g_final[0] if g_final else None,
                           })


def run_translate(cfg: PipelineConfig, work_dir) -> Path:
    prep, prep_path = _require_manifest(cfg, work_dir, STAGE_PREPROCESS)
    synth, synth_path = _require_manifest(cfg, work_dir, STAGE_TRAIN_SYNTH)
    root = prep_path.parent
    nets, gen_cfg, _ = load_checkpoint(synth_path.parent / synth["checkpoint"])
    out = stage_dir(cfg, work_dir, STAGE_TRANSLATE)
    out.mkdir(parents=True, exist_ok=True)
    sites = prep["sites"]
    entries = []
    for case in sorted(_cases_by_split(prep, "source-train"),
                       key=lambda c: c["case_id"]):
        img, lbl = _load_pair(case, root)
        for s_idx, site in enumerate(sites):
            code = one_hot_code(s_idx, gen_cfg.code_dim)
            synth_img, _ = translate(img, lbl, code, nets, gen_cfg)
            case_id = f"{case['case_id']}_as_{site}"
            img_rel = f"{case_id}_img"
            lbl_rel = f"{case_id}_lbl"
            save_volume(synth_img, out / img_rel)
            save_labelmap(lbl, out / lbl_rel)
            entries.append({
                "case_id": case_id,
                "source_case": case["case_id"],
                "site_id": site,
                "code": [float(c) for c in code],
                "image": img_rel,
                "label": lbl_rel,
            })
    return _write_manifest(out, STAGE_TRANSLATE, cfg,
                           {STAGE_PREPROCESS: prep_path,
                            STAGE_TRAIN_SYNTH: synth_path},
                           {"cases": entries})


def run_oversample(cfg: PipelineConfig, work_dir) -> Path:
    prep, prep_path = _require_manifest(cfg, work_dir, STAGE_PREPROCESS)
    synth, synth_path = _require_manifest(cfg, work_dir, STAGE_TRAIN_SYNTH)
    root = prep_path.parent
    nets, gen_cfg, _ = load_checkpoint(synth_path.parent / synth["checkpoint"])
    out = stage_dir(cfg, work_dir, STAGE_OVERSAMPLE)
    out.mkdir(parents=True, exist_ok=True)

    source_cases = []
    for case in sorted(_cases_by_split(prep, "source-train"),
                       key=lambda c: c["case_id"]):
        img, lbl = _load_pair(case, root)
        source_cases.append((case["case_id"], img, lbl))
    hard_ids = select_hard_samples(source_cases, cfg.hard_rule)
    hard_cases = [c for c in source_cases if c[0] in set(hard_ids)]

    entries = []
    code_sets = []
    for set_idx, set_seed in enumerate(cfg.oversample.code_set_seeds):
        seed = _stage_seed(cfg, STAGE_OVERSAMPLE, set_seed)
        codes = generate_unseen_codes(cfg.oversample.n_codes,
                                      cfg.oversample.scheme, seed=seed,
                                      n_sites=gen_cfg.code_dim)
        code_sets.append([[float(x) for x in c] for c in codes])
        for rec in oversample_cases(hard_cases, codes, nets, gen_cfg):
            case_id = f"{rec['case_id']}_set{set_idx}"
            img_rel = f"{case_id}_img"
            lbl_rel = f"{case_id}_lbl"
            save_volume(rec["image"], out / img_rel)
            save_labelmap(rec["label"], out / lbl_rel)
            entries.append({
                "case_id": case_id,
                "source_case": rec["source_case"],
                "code": rec["code"],
                "code_set": set_idx,
                "image": img_rel,
                "label": lbl_rel,
            })
    return _write_manifest(out, STAGE_OVERSAMPLE, cfg,
                           {STAGE_PREPROCESS: prep_path,
                            STAGE_TRAIN_SYNTH: synth_path},
                           {"hard_case_ids": sorted(hard_ids),
                            "code_sets": code_sets,
                            "cases": entries})


def _synthetic_train_entries(cfg, work_dir, member_code_set=None):
    """(case_id, image path, label path) list for segmentation training."""
    trans, trans_path = _require_manifest(cfg, work_dir, STAGE_TRANSLATE)
    over, over_path = _require_manifest(cfg, work_dir, STAGE_OVERSAMPLE)
    entries = []
    for case in trans["cases"]:
        entries.append((case["case_id"], trans_path.parent / case["image"],
                        trans_path.parent / case["label"]))
    for case in over["cases"]:
        if member_code_set is not None and case["code_set"] != member_code_set:
            continue
        entries.append((case["case_id"], over_path.parent / case["image"],
                        over_path.parent / case["label"]))
    inputs = {STAGE_TRANSLATE: trans_path, STAGE_OVERSAMPLE: over_path}
    return entries, inputs


def _source_train_entries(cfg, work_dir):
    prep, prep_path = _require_manifest(cfg, work_dir, STAGE_PREPROCESS)
    root = prep_path.parent
    entries = [(c["case_id"], root / c["image"], root / c["label"])
               for c in sorted(_cases_by_split(prep, "source-train"),
                               key=lambda c: c["case_id"])]
    return entries, {STAGE_PREPROCESS: prep_path}


def run_train_seg(cfg: PipelineConfig, work_dir) -> Path:
    out = stage_dir(cfg, work_dir, STAGE_TRAIN_SEG)
    out.mkdir(parents=True, exist_ok=True)
    seed = _stage_seed(cfg, STAGE_TRAIN_SEG)
    inputs = {}
    members_payload = []
    all_train_ids = set()
    for idx, member in enumerate(cfg.segmentation.members):
        if cfg.train_on == "source":
            entries, inputs = _source_train_entries(cfg, work_dir)
        else:
            entries, inputs = _synthetic_train_entries(cfg, work_dir,
                                                       member.code_set)
        if not entries:
            raise PipelineError("no training cases for segmentation",
                                STAGE_TRAIN_SEG)
        pairs = [(load_volume(i), load_labelmap(l)) for _, i, l in entries]
        logger.info("train-seg member %d/%d on %d cases",
                    idx + 1, len(cfg.segmentation.members), len(pairs))
        model = train_segmenter(pairs, cfg.segmentation, member=member, seed=seed)
        ckpt = f"member{idx}.pt"
        save_seg_checkpoint(model, cfg.segmentation, out / ckpt)
        members_payload.append({
            "checkpoint": ckpt,
            "arch": member.arch,
            "aug_strength": member.aug_strength,
            "member_seed": member.seed,
            "code_set": member.code_set,
            "train_case_ids": sorted(e[0] for e in entries),
            "best_epoch": model.best_epoch,
            "best_val_dice": model.best_val_dice,
        })
        all_train_ids.update(e[0] for e in entries)
    return _write_manifest(out, STAGE_TRAIN_SEG, cfg, inputs, {
        "train_on": cfg.train_on,
        "members": members_payload,
        "train_case_ids": sorted(all_train_ids),
    })


def _load_members(manifest, root):
    models = []
    for member in manifest["members"]:
        model, _ = load_seg_checkpoint(Path(root) / member["checkpoint"])
        models.append(model)
    return models


def run_self_train(cfg: PipelineConfig, work_dir) -> Path:
    prep, prep_path = _require_manifest(cfg, work_dir, STAGE_PREPROCESS)
    seg, seg_path = _require_manifest(cfg, work_dir, STAGE_TRAIN_SEG)
    root = prep_path.parent
    out = stage_dir(cfg, work_dir, STAGE_SELF_TRAIN)
    out.mkdir(parents=True, exist_ok=True)

    real_targets = []
    for case in sorted(_cases_by_split(prep, "target-train"),
                       key=lambda c: c["case_id"]):
        real_targets.append((case["case_id"], load_volume(root / case["image"])))

    if cfg.train_on == "source":
        synth_entries, inputs = _source_train_entries(cfg, work_dir)
    else:
        synth_entries, inputs = _synthetic_train_entries(cfg, work_dir)
    inputs[STAGE_PREPROCESS] = prep_path
    inputs[STAGE_TRAIN_SEG] = seg_path
    synth_pairs = [(load_volume(i), load_labelmap(l)) for _, i, l in synth_entries]
    synth_ids = [e[0] for e in synth_entries]

    models = _load_members(seg, seg_path.parent)
    rounds_payload = []
    for round_idx in range(1, cfg.self_training.rounds + 1):
        round_dir = out / f"round_{round_idx}"
        round_dir.mkdir(parents=True, exist_ok=True)
        records = []
        reliable_pairs = []
        for case_id, img in real_targets:
            pred = predict(img, models, cfg.segmentation, case_id=case_id)
            lbl_rel = f"round_{round_idx}/pseudo_{case_id}"
            save_labelmap(pred.label, out / lbl_rel)
            rec = make_record(case_id, pred.label, round_idx,
                              mode=cfg.self_training.filter_mode,
                              label_path=lbl_rel)
            records.append(rec)
            if rec.reliable:
                reliable_pairs.append((case_id, img, pred.label))
        if not reliable_pairs:
            logger.warning("self-training round %d: no reliable pseudo labels, "
                           "training on the synthetic set only", round_idx)
        train_pairs = list(synth_pairs) + [(img, lbl) for _, img, lbl in reliable_pairs]
        train_ids = list(synth_ids) + [cid for cid, _, _ in reliable_pairs]

        seed = _stage_seed(cfg, STAGE_SELF_TRAIN, round_idx)
        new_models = []
        member_files = []
        for idx, member in enumerate(cfg.segmentation.members):
            model = train_segmenter(train_pairs, cfg.segmentation,
                                    member=member, seed=seed)
            ckpt = f"round_{round_idx}/member{idx}.pt"
            save_seg_checkpoint(model, cfg.segmentation, out / ckpt)
            new_models.append(model)
            member_files.append(ckpt)
        models = new_models

        with open(round_dir / "records.json", "w") as f:
            json.dump({"round": round_idx,
                       "records": [r.to_dict() for r in records]},
                      f, indent=1, sort_keys=True)
            f.write("\n")
        rounds_payload.append({
            "round": round_idx,
            "records_file": f"round_{round_idx}/records.json",
            "members": member_files,
            "n_reliable": len(reliable_pairs),
            "reliable_ids": sorted(cid for cid, _, _ in reliable_pairs),
            "unreliable_ids": sorted(r.case_id for r in records if not r.reliable),
            "train_case_ids": sorted(train_ids),
        })
        logger.info("self-training round %d: %d/%d pseudo labels reliable",
                    round_idx, len(reliable_pairs), len(real_targets))

    final_members = (rounds_payload[-1]["members"] if rounds_payload
                     else [m["checkpoint"] for m in seg["members"]])
    return _write_manifest(out, STAGE_SELF_TRAIN, cfg, inputs, {
        "rounds": rounds_payload,
        "final_members": final_members,
        "final_members_stage": STAGE_SELF_TRAIN if rounds_payload else STAGE_TRAIN_SEG,
    })


def _final_models(cfg, work_dir):
    """The newest trained ensemble plus its manifest path for provenance."""
    if cfg.predict_model_stage == "train-seg":
        choice = STAGE_TRAIN_SEG
    elif cfg.predict_model_stage == "self-train":
        choice = STAGE_SELF_TRAIN
    else:
        choice = STAGE_SELF_TRAIN
        if not (stage_dir(cfg, work_dir, STAGE_SELF_TRAIN) / MANIFEST).exists():
            choice = STAGE_TRAIN_SEG
    manifest, path = _require_manifest(cfg, work_dir, choice)
    if choice == STAGE_SELF_TRAIN:
        if manifest["rounds"]:
            files = manifest["final_members"]
            models = []
            for f in files:
                model, _ = load_seg_checkpoint(path.parent / f)
                models.append(model)
            return models, path
        manifest, path = _require_manifest(cfg, work_dir, STAGE_TRAIN_SEG)
    return _load_members(manifest, path.parent), path


def run_predict(cfg: PipelineConfig, work_dir) -> Path:
    prep, prep_path = _require_manifest(cfg, work_dir, STAGE_PREPROCESS)
    models, models_path = _final_models(cfg, work_dir)
    root = prep_path.parent
    out = stage_dir(cfg, work_dir, STAGE_PREDICT)
    out.mkdir(parents=True, exist_ok=True)
    cases = _cases_by_split(prep, cfg.predict_split)
    if not cases:
        raise PipelineError(f"no cases in split {cfg.predict_split!r}",
                            STAGE_PREDICT)
    entries = []
    for case in sorted(cases, key=lambda c: c["case_id"]):
        img = load_volume(root / case["image"])
        pred = predict(img, models, cfg.segmentation, case_id=case["case_id"])
        lbl_rel = f"pred_{case['case_id']}"
        save_labelmap(pred.label, out / lbl_rel)
        entry = {"case_id": case["case_id"], "label": lbl_rel,
                 "model_ids": pred.model_ids}
        if cfg.save_probabilities:
            prob_rel = f"prob_{case['case_id']}.npy"
            np.save(out / prob_rel, pred.probabilities)
            entry["probabilities"] = prob_rel
        entries.append(entry)
    model_stage = models_path.parent.parent.name
    return _write_manifest(out, STAGE_PREDICT, cfg,
                           {STAGE_PREPROCESS: prep_path, model_stage: models_path},
                           {"split": cfg.predict_split, "cases": entries,
                            "model_stage": model_stage})


def run_evaluate(cfg: PipelineConfig, work_dir) -> Path:
    prep, prep_path = _require_manifest(cfg, work_dir, STAGE_PREPROCESS)
    preds, preds_path = _require_manifest(cfg, work_dir, STAGE_PREDICT)
    out = stage_dir(cfg, work_dir, STAGE_EVALUATE)
    refs, pred_labels = {}, {}
    prep_root, pred_root = prep_path.parent, preds_path.parent
    ref_by_id = {c["case_id"]: c for c in prep["cases"]}
    for entry in preds["cases"]:
        case = ref_by_id.get(entry["case_id"])
        if case is None:
            raise PipelineError(f"prediction for unknown case {entry['case_id']}",
                                STAGE_EVALUATE)
        refs[entry["case_id"]] = load_labelmap(prep_root / case["label"])
        pred_labels[entry["case_id"]] = load_labelmap(pred_root / entry["label"])
    report = metrics_mod.evaluate_dataset(pred_labels, refs)
    out.mkdir(parents=True, exist_ok=True)
    metrics_mod.write_report_csv(report, out / "report.csv")
    metrics_mod.write_report_markdown(report, out / "report.md")
    return _write_manifest(out, STAGE_EVALUATE, cfg,
                           {STAGE_PREPROCESS: prep_path, STAGE_PREDICT: preds_path},
                           {"report_csv": "report.csv",
                            "report_markdown": "report.md",
                            "split": preds["split"],
                            "mean": report.mean_row(),
                            "n_cases": len(report.rows)})


def run_report(cfg: PipelineConfig, work_dir) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ev, ev_path = _require_manifest(cfg, work_dir, STAGE_EVALUATE)
    prep, prep_path = _require_manifest(cfg, work_dir, STAGE_PREPROCESS)
    out = stage_dir(cfg, work_dir, STAGE_REPORT)
    out.mkdir(parents=True, exist_ok=True)
    inputs = {STAGE_EVALUATE: ev_path, STAGE_PREPROCESS: prep_path}
    payload = {"mean": ev["mean"], "split": ev["split"]}

    # loss curves, when synthesis ran
    synth_dir = stage_dir(cfg, work_dir, STAGE_TRAIN_SYNTH)
    if (synth_dir / MANIFEST).exists():
        synth, synth_path = _require_manifest(cfg, work_dir, STAGE_TRAIN_SYNTH)
        inputs[STAGE_TRAIN_SYNTH] = synth_path
        curves = {}
        import csv as _csv
        with open(synth_dir / synth["loss_trace"]) as f:
            for row in _csv.DictReader(f):
                curves.setdefault(row["term"], []).append(
                    (int(row["epoch"]), float(row["value"])))
        fig, ax = plt.subplots(figsize=(7, 4))
        for term in ("g_total", "d_loss", "g_adv", "edge", "seg_dec", "seg_aux"):
            if term in curves:
                pts = sorted(curves[term])
                ax.plot([p[0] for p in pts], [p[1] for p in pts], label=term)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out / "losses.png", dpi=110)
        plt.close(fig)
        payload["losses_png"] = "losses.png"

    # style montage: source / translated per site / real target per site
    trans_dir = stage_dir(cfg, work_dir, STAGE_TRANSLATE)
    if (trans_dir / MANIFEST).exists():
        trans, trans_path = _require_manifest(cfg, work_dir, STAGE_TRANSLATE)
        inputs[STAGE_TRANSLATE] = trans_path
        sites = prep["sites"]
        src_cases = sorted(_cases_by_split(prep, "source-train"),
                           key=lambda c: c["case_id"])
        if src_cases:
            src_case = src_cases[0]
            src_img = load_volume(prep_path.parent / src_case["image"])
            n_cols = len(sites)
            fig, axes = plt.subplots(3, n_cols, figsize=(2.4 * n_cols, 7))
            axes = np.atleast_2d(axes)
            z_mid = src_img.data.shape[2] // 2
            by_site = {c["site_id"]: c for c in trans["cases"]
                       if c["source_case"] == src_case["case_id"]}
            tgt_by_site = {}
            for c in _cases_by_split(prep, "target-train"):
                tgt_by_site.setdefault(c["site_id"], c)
            for col, site in enumerate(sites):
                axes[0, col].imshow(src_img.data[:, :, z_mid].T, cmap="gray",
                                    vmin=-1, vmax=1)
                axes[0, col].set_title(f"source ({site})", fontsize=8)
                if site in by_site:
                    timg = load_volume(trans_path.parent / by_site[site]["image"])
                    axes[1, col].imshow(timg.data[:, :, z_mid].T, cmap="gray",
                                        vmin=-1, vmax=1)
                axes[1, col].set_title(f"translated -> {site}", fontsize=8)
                if site in tgt_by_site:
                    rimg = load_volume(prep_path.parent / tgt_by_site[site]["image"])
                    axes[2, col].imshow(rimg.data[:, :, z_mid].T, cmap="gray",
                                        vmin=-1, vmax=1)
                axes[2, col].set_title(f"real {site}", fontsize=8)
                for row in range(3):
                    axes[row, col].axis("off")
            fig.tight_layout()
            fig.savefig(out / "montage.png", dpi=110)
            plt.close(fig)
            payload["montage_png"] = "montage.png"

    report_md = (ev_path.parent / ev["report_markdown"]).read_text()
    lines = ["# Pipeline report", "",
             f"Split: {ev['split']}  |  cases: {ev['n_cases']}", "",
             "## Metrics", "", report_md, ""]
    if "losses_png" in payload:
        lines += ["## Synthesis loss curves", "", "![losses](losses.png)", ""]
    if "montage_png" in payload:
        lines += ["## Site styles", "", "![montage](montage.png)", ""]
    (out / "summary.md").write_text("\n".join(lines))
    payload["summary"] = "summary.md"
    return _write_manifest(out, STAGE_REPORT, cfg, inputs, payload)


# ---------------------------------------------------------------------------
# audit
# ---------------------------------------------------------------------------

def run_audit(cfg: PipelineConfig, work_dir) -> dict:
    """Verify the manifest hash chain and the pseudo-label exclusions."""
    problems = []
    checked = []
    for stage in STAGES:
        path = stage_dir(cfg, work_dir, stage) / MANIFEST
        if not path.exists():
            continue
        with open(path) as f:
            manifest = json.load(f)
        for name, ref in manifest.get("inputs", {}).items():
            upstream = stage_dir(cfg, work_dir, name) / ref["manifest"]
            if not upstream.exists():
                problems.append(f"{stage}: input manifest for {name!r} missing")
                continue
            actual = _sha256(upstream)
            if actual != ref["sha256"]:
                problems.append(
                    f"{stage}: hash mismatch for input {name!r} "
                    f"(recorded {ref['sha256'][:12]}, actual {actual[:12]})")
            checked.append(f"{stage}<-{name}")

    st_path = stage_dir(cfg, work_dir, STAGE_SELF_TRAIN) / MANIFEST
    if st_path.exists():
        with open(st_path) as f:
            st = json.load(f)
        for rnd in st.get("rounds", []):
            unreliable = set(rnd["unreliable_ids"])
            leaked = unreliable & set(rnd["train_case_ids"])
            if leaked:
                problems.append(
                    f"self-train round {rnd['round']}: unreliable cases in "
                    f"training manifest: {sorted(leaked)}")
            checked.append(f"self-train-round-{rnd['round']}-exclusions")
    return {"ok": not problems, "problems": problems, "checked": checked}


STAGE_RUNNERS = {
    STAGE_PHANTOM: run_phantom,
    STAGE_PREPROCESS: run_preprocess,
    STAGE_TRAIN_SYNTH: run_train_synth,
    STAGE_TRANSLATE: run_translate,
    STAGE_OVERSAMPLE: run_oversample,
    STAGE_TRAIN_SEG: run_train_seg,
    STAGE_SELF_TRAIN: run_self_train,
    STAGE_PREDICT: run_predict,
    STAGE_EVALUATE: run_evaluate,
    STAGE_REPORT: run_report,
}


def run_all(cfg: PipelineConfig, work_dir, stages=STAGES):
    """Convenience driver running stages in order; returns manifest paths."""
    results = {}
    for stage in stages:
        logger.info("running stage %s", stage)
        results[stage] = STAGE_RUNNERS[stage](cfg, work_dir)
    return results
