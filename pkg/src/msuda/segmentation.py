"""3D U-Net segmenter training, sliding-window inference, and ensembling.

Training keeps the reduced augmentation set: LR flips plus the local
tumor/cochlea intensity augmentation, nothing else. Inference uses
Gaussian-weighted overlapping windows; ensembles average the per-voxel
class probabilities of their members before the argmax.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .volume import Volume, LabelMap
from .intensity import AugmentConfig, augment_local_intensity, flip_lr
from .nets import build_unet
from .synthesis import dice_ce_loss, _to_tensor, _slab_patch, CHECKPOINT_FORMAT
from .windows import iter_windows, weight_block, gaussian_profile

logger = logging.getLogger(__name__)

ARCHS = ("unet", "res-unet")
AUG_STRENGTHS = ("strong", "weak")


@dataclass
class SegMemberSpec:
    arch: str = "unet"
    aug_strength: str = "strong"
    seed: int = 0
    code_set: int | None = None  # which unseen-code set this member trains on

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.aug_strength not in AUG_STRENGTHS:
            raise ValueError(f"aug_strength must be one of {AUG_STRENGTHS}")


def default_members(n: int):
    combos = [("unet", "strong"), ("res-unet", "strong"),
              ("unet", "weak"), ("res-unet", "weak")]
    return [SegMemberSpec(arch=combos[i % 4][0], aug_strength=combos[i % 4][1],
                          seed=i) for i in range(n)]


@dataclass
class SegConfig:
    arch: str = "unet"
    aug_strength: str = "strong"
    epochs: int = 25
    lr: float = 1e-3
    lr_schedule: str = "poly"  # poly (exponent 0.9) or const
    patch_shape: tuple = (64, 48, 8)
    ensemble_size: int = 3
    seed: int = 0
    channels: tuple = (8, 16, 32)
    batch_size: int = 2
    val_fraction: float = 0.2
    max_val_cases: int = 3
    val_interval: int = 1
    steps_per_epoch: int = 0  # 0: one pass over the training cases
    flip_prob: float = 0.5
    members: list = None

    def __post_init__(self):
        self.patch_shape = tuple(int(p) for p in self.patch_shape)
        self.channels = tuple(int(c) for c in self.channels)
        if self.ensemble_size < 1:
            raise ValueError("ensemble size must be >= 1")
        if self.members is None:
            self.members = default_members(self.ensemble_size)
        else:
            self.members = [m if isinstance(m, SegMemberSpec) else SegMemberSpec(**m)
                            for m in self.members]
        if len(self.members) != self.ensemble_size:
            raise ValueError("need one member spec per ensemble slot")


@dataclass
class TrainedModel:
    spec: SegMemberSpec
    net: torch.nn.Module
    best_epoch: int = -1
    best_val_dice: float = float("nan")


@dataclass
class Prediction:
    probabilities: np.ndarray  # (4, nx, ny, nz)
    label: LabelMap
    case_id: str | None = None
    model_ids: list = field(default_factory=list)


def _lr_at(cfg: SegConfig, epoch: int) -> float:
    if cfg.lr_schedule == "const":
        return cfg.lr
    if cfg.lr_schedule == "poly":
        return cfg.lr * (1.0 - epoch / max(1, cfg.epochs)) ** 0.9
    raise ValueError(f"unknown lr schedule {cfg.lr_schedule!r}")


def _aug_config(strength: str) -> AugmentConfig:
    return AugmentConfig() if strength == "strong" else AugmentConfig.weak()


def _as_pair_arrays(pair):
    img, lbl = pair
    img = img.data if isinstance(img, Volume) else np.asarray(img)
    lbl = lbl.data if isinstance(lbl, LabelMap) else np.asarray(lbl)
    return img, lbl


def mean_foreground_dice(pred_label, ref_label) -> float:
    from .metrics import dice
    p = pred_label.data if isinstance(pred_label, LabelMap) else pred_label
    r = ref_label.data if isinstance(ref_label, LabelMap) else ref_label
    return float(np.mean([dice(p == c, r == c) for c in (1, 2, 3)]))


def train_segmenter(train_set, cfg: SegConfig, member: SegMemberSpec | None = None,
                    seed: int = 0, val_set=None) -> TrainedModel:
    """Train one segmenter; keeps the best epoch by held-out mean Dice.

    train_set: list of (image, label) pairs, Volumes or arrays. When no
    validation pairs are supplied a deterministic slice of the training
    set is held out for epoch selection.
    """
    if not train_set:
        raise ValueError("empty training set")
    member = member or SegMemberSpec(arch=cfg.arch, aug_strength=cfg.aug_strength)
    pairs = [_as_pair_arrays(p) for p in train_set]

    rng_master = np.random.default_rng(
        np.random.SeedSequence([int(seed), int(member.seed), 0xA0]))
    if val_set is None:
        if len(pairs) >= 4:
            order = rng_master.permutation(len(pairs))
            n_val = max(1, int(round(cfg.val_fraction * len(pairs))))
            n_val = min(n_val, cfg.max_val_cases)
            val_idx = set(order[:n_val].tolist())
            val_pairs = [pairs[i] for i in sorted(val_idx)]
            pairs = [pairs[i] for i in range(len(pairs)) if i not in val_idx]
        else:
            val_pairs = []
    else:
        val_pairs = [_as_pair_arrays(p) for p in val_set]

    torch_seed, = np.random.SeedSequence(
        [int(seed), int(member.seed), 0xB1]).generate_state(1, dtype=np.uint64)
    torch.manual_seed(int(torch_seed))
    net = build_unet(member.arch, cfg.channels)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    aug = _aug_config(member.aug_strength)

    steps = cfg.steps_per_epoch or max(1, math.ceil(len(pairs) / cfg.batch_size))
    best_state, best_dice, best_epoch = None, -1.0, -1

    for epoch in range(cfg.epochs):
        lr = _lr_at(cfg, epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        rng = np.random.default_rng(
            np.random.SeedSequence([int(seed), int(member.seed), 1, epoch]))
        order = rng.permutation(len(pairs))
        net.train()
        for step in range(steps):
            xs, ys = [], []
            for k in range(cfg.batch_size):
                img, lbl = pairs[order[(step * cfg.batch_size + k) % len(pairs)]]
                sl = _slab_patch(img, cfg.patch_shape, rng)
                x, y = img[sl], lbl[sl]
                if rng.random() < cfg.flip_prob:
                    x, y = flip_lr(x, y)
                x = augment_local_intensity(x, y, aug, rng)
                xs.append(x)
                ys.append(y)
            xb = torch.as_tensor(np.stack(xs), dtype=torch.float32).unsqueeze(1)
            yb = torch.as_tensor(np.stack(ys).astype(np.int64))
            loss = dice_ce_loss(net(xb), yb)
            if not math.isfinite(float(loss.detach())):
                raise RuntimeError(
                    f"non-finite segmentation loss at epoch {epoch} step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()

        last = epoch == cfg.epochs - 1
        if val_pairs and (last or epoch % max(1, cfg.val_interval) == 0):
            scores = []
            for img, lbl in val_pairs:
                pred = _predict_single(img, net, cfg)
                scores.append(mean_foreground_dice(pred.label.data, lbl))
            val_dice = float(np.mean(scores))
            if val_dice > best_dice:
                best_dice, best_epoch = val_dice, epoch
                best_state = copy.deepcopy(net.state_dict())

    if best_state is not None:
        net.load_state_dict(best_state)
    return TrainedModel(member, net, best_epoch, best_dice)


def train_ensemble(train_set, cfg: SegConfig, seed: int = 0, val_set=None):
    models = []
    for idx, member in enumerate(cfg.members):
        logger.info("training ensemble member %d/%d (%s, %s aug)",
                    idx + 1, len(cfg.members), member.arch, member.aug_strength)
        models.append(train_segmenter(train_set, cfg, member=member,
                                      seed=seed, val_set=val_set))
    return models


def _model_list(models):
    if isinstance(models, (TrainedModel, torch.nn.Module)):
        models = [models]
    return [m.net if isinstance(m, TrainedModel) else m for m in models], \
           [m.spec if isinstance(m, TrainedModel) else None for m in models]


def _predict_single(img_data, net, cfg: SegConfig):
    return predict(img_data, net, cfg)


def predict(v, models, cfg: SegConfig, case_id=None) -> Prediction:
    """Gaussian-blended sliding-window inference, ensemble-averaged.

    v: Volume or array. The ensemble probability map is the voxelwise
    arithmetic mean over members; the label is its argmax.
    """
    data = v.data if isinstance(v, Volume) else np.asarray(v)
    spacing = v.spacing if isinstance(v, Volume) else (1.0, 1.0, 1.0)
    nets, specs = _model_list(models)
    patch = tuple(min(p, d) for p, d in zip(cfg.patch_shape, data.shape))
    weights = weight_block(patch, gaussian_profile)

    mean_probs = np.zeros((4,) + data.shape, dtype=np.float64)
    for net in nets:
        probs = np.zeros((4,) + data.shape, dtype=np.float64)
        wsum = np.zeros(data.shape, dtype=np.float64)
        was_training = net.training
        net.eval()
        with torch.no_grad():
            for origin in iter_windows(data.shape, patch):
                sl = tuple(slice(o, o + p) for o, p in zip(origin, patch))
                x = _to_tensor(data[sl])
                p = F.softmax(net(x), dim=1)[0].numpy()
                probs[(slice(None),) + sl] += p * weights
                wsum[sl] += weights
        if was_training:
            net.train()
        probs /= wsum
        mean_probs += probs
    mean_probs /= len(nets)
    mean_probs /= mean_probs.sum(axis=0, keepdims=True)

    label = LabelMap(np.argmax(mean_probs, axis=0).astype(np.uint8), spacing)
    model_ids = [f"{s.arch}-{s.aug_strength}-s{s.seed}" if s else "model"
                 for s in specs]
    return Prediction(mean_probs.astype(np.float32), label, case_id, model_ids)


def save_seg_checkpoint(model: TrainedModel, cfg: SegConfig, path,
                        optimizer=None, epoch=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "kind": "segmentation",
        "config": asdict(cfg),
        "member": asdict(model.spec),
        "model": model.net.state_dict(),
        "optimizers": {} if optimizer is None else {"opt": optimizer.state_dict()},
        "epoch": model.best_epoch if epoch is None else int(epoch),
        "best_val_dice": model.best_val_dice,
    }
    torch.save(payload, path)


def load_seg_checkpoint(path) -> tuple:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("kind") != "segmentation":
        raise ValueError(f"not a segmentation checkpoint: {path}")
    cfg_dict = dict(payload["config"])
    cfg = SegConfig(**cfg_dict)
    spec = SegMemberSpec(**payload["member"])
    net = build_unet(spec.arch, cfg.channels)
    net.load_state_dict(payload["model"])
    model = TrainedModel(spec, net, payload.get("epoch", -1),
                         payload.get("best_val_dice", float("nan")))
    return model, cfg
