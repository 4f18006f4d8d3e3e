"""Site-conditioned unpaired translation: losses, training, inference.

The generator translates transformed source volumes into target-style
volumes whose appearance is steered by a site code through the dynamic
instance norm of the synthesis decoder. Training mixes a least-squares
adversarial loss, query-selected patchwise contrastive losses in both
directions, segmentation losses from the attached decoder and an auxiliary
segmenter, and an edge-consistency loss.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .volume import Volume, LabelMap, VolumeError
from .intensity import (
    AugmentConfig, label_assisted_transform, augment_contrast, flip_lr,
)
from .nets import (
    TranslationEncoder, SynthesisDecoder, SegDecoder, SiteController,
    PatchDiscriminator3d, ProjectionHead, UNet3d, init_weights,
)
from .windows import iter_windows, weight_block, triangular_profile

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "msuda-checkpoint-v1"


@dataclass
class GeneratorConfig:
    """Translation network and schedule settings.

    Defaults are the full-scale settings; `desk()` returns the scaled-down
    configuration that trains on a CPU in minutes.
    """

    n_resblocks: int = 9
    base_channels: int = 64
    patch_shape: tuple = (256, 144, 8)
    code_dim: int = 3
    lambda_seg_source: float = 0.5   # attached decoder on source labels
    lambda_seg_synth: float = 0.5    # auxiliary segmenter on synthetic output
    lambda_edge: float = 1.0
    lr: float = 2e-4
    epochs_flat: int = 400
    epochs_decay: int = 400
    nce_locations: int = 128
    nce_keep: int = 64
    nce_temperature: float = 0.07
    nce_proj_dim: int = 128
    disc_channels: int = 16
    disc_lr: float = 0.0         # 0: use the generator lr
    snet_channels: tuple = (8, 16, 32)
    snet_lr: float = 0.0         # 0: use the generator lr
    snet_bootstrap: bool = True  # also fit S on transformed source inputs
    steps_per_epoch: int = 0     # 0: one pass over the larger case list
    checkpoint_interval: int = 0  # extra periodic checkpoints; 0 = final only

    def __post_init__(self):
        self.patch_shape = tuple(int(p) for p in self.patch_shape)
        self.snet_channels = tuple(int(c) for c in self.snet_channels)
        if min(self.patch_shape) < 4 or self.base_channels < 1 or self.n_resblocks < 1:
            raise ValueError("network dimensions must be positive")
        for lam in (self.lambda_seg_source, self.lambda_seg_synth, self.lambda_edge):
            if lam < 0:
                raise ValueError("loss weights must be >= 0")

    @classmethod
    def desk(cls, **overrides):
        params = dict(n_resblocks=4, base_channels=16, patch_shape=(64, 48, 8),
                      epochs_flat=15, epochs_decay=15, disc_channels=16,
                      snet_channels=(8, 16, 32))
        params.update(overrides)
        return cls(**params)


def lr_for_epoch(cfg: GeneratorConfig, epoch: int) -> float:
    """Constant for epochs_flat epochs, then linear decay to zero."""
    if epoch < cfg.epochs_flat:
        return cfg.lr
    frac = (epoch - cfg.epochs_flat) / float(max(1, cfg.epochs_decay))
    return cfg.lr * max(0.0, 1.0 - frac)


class SynthesisNets(torch.nn.Module):
    """Bundle of encoder, decoders, controller, discriminator, projections."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        front = cfg.n_resblocks // 2
        back = cfg.n_resblocks - front
        self.encoder = TranslationEncoder(1, cfg.base_channels, front)
        self.dec_syn = SynthesisDecoder(cfg.base_channels, back)
        self.dec_seg = SegDecoder(cfg.base_channels, back)
        self.controller = SiteController(cfg.code_dim, self.dec_syn.style_channels)
        self.disc = PatchDiscriminator3d(1, cfg.disc_channels)
        self.snet = UNet3d(1, 4, cfg.snet_channels)
        # the raw-patch tap keeps an identity head so its normalized
        # features preserve intensity polarity; deeper taps get MLPs
        self.heads = torch.nn.ModuleList(
            [torch.nn.Identity()]
            + [ProjectionHead(c, cfg.nce_proj_dim)
               for c in self.encoder.tap_channels[1:]])
        for net in (self.encoder, self.dec_syn, self.dec_seg, self.disc):
            init_weights(net)

    def style_params(self, code):
        return self.controller(code)

    def translate_patch(self, x, code):
        gamma, beta = self.controller(code)
        return self.dec_syn(self.encoder(x), gamma, beta)

    def translate_patch_pinned(self, x, gamma, beta):
        """Bypass the controller; used to verify the code only acts via DIN."""
        return self.dec_syn(self.encoder(x), gamma, beta)

    def generator_parameters(self):
        mods = (self.encoder, self.dec_syn, self.dec_seg, self.controller, self.heads)
        for m in mods:
            yield from m.parameters()


# ---------------------------------------------------------------------------
# loss terms
# ---------------------------------------------------------------------------

def lsgan_d_loss(d_real, d_fake):
    return 0.5 * ((d_real - 1.0).pow(2).mean() + d_fake.pow(2).mean())


def lsgan_g_loss(d_fake):
    return (d_fake - 1.0).pow(2).mean()


def _sobel_kernels(dtype, device):
    d = torch.tensor([-1.0, 0.0, 1.0], dtype=dtype, device=device)
    s = torch.tensor([1.0, 2.0, 1.0], dtype=dtype, device=device)
    kx = torch.einsum("i,j,k->ijk", d, s, s)
    ky = torch.einsum("i,j,k->ijk", s, d, s)
    kz = torch.einsum("i,j,k->ijk", s, s, d)
    return torch.stack([kx, ky, kz]).unsqueeze(1)  # (3, 1, 3, 3, 3)


def edge_magnitude(x, eps: float = 1e-12):
    """3D Sobel gradient magnitude of a single-channel volume batch."""
    k = _sobel_kernels(x.dtype, x.device)
    g = F.conv3d(x, k, padding=1)
    return torch.sqrt(g.pow(2).sum(dim=1, keepdim=True) + eps)


def edge_loss(a, b):
    """Mean absolute difference of Sobel gradient magnitudes."""
    return (edge_magnitude(a) - edge_magnitude(b)).abs().mean()


def dice_ce_loss(logits, target, eps: float = 1e-5):
    """Soft Dice averaged over classes plus voxel cross-entropy."""
    ce = F.cross_entropy(logits, target)
    probs = F.softmax(logits, dim=1)
    n_classes = logits.shape[1]
    onehot = F.one_hot(target, n_classes).permute(0, 4, 1, 2, 3).to(probs.dtype)
    dims = (0, 2, 3, 4)
    inter = (probs * onehot).sum(dim=dims)
    denom = probs.sum(dim=dims) + onehot.sum(dim=dims)
    dice = (2.0 * inter + eps) / (denom + eps)
    return ce + (1.0 - dice.mean())


def qs_attn_nce(feats_real, feats_fake, heads, rng, n_locations: int = 128,
                n_keep: int = 64, temperature: float = 0.07):
    """Query-selected patchwise contrastive loss over encoder feature taps.

    At each tap, a shared random subset of spatial locations is drawn for
    both volumes. A self-attention matrix over the real-image features
    yields per-query entropies; only the lowest-entropy queries are kept.
    The selected attention rows aggregate both feature sets, which are
    projected, normalized, and matched with InfoNCE.
    """
    total = feats_real[0].new_zeros(())
    n_terms = 0
    for tap, (fr, ff) in enumerate(zip(feats_real, feats_fake)):
        b, c = fr.shape[0], fr.shape[1]
        fr_flat = fr.reshape(b, c, -1)
        ff_flat = ff.reshape(b, c, -1)
        n_spatial = fr_flat.shape[-1]
        n_pick = min(n_locations, n_spatial)
        for i in range(b):
            idx = rng.choice(n_spatial, size=n_pick, replace=False)
            idx = torch.as_tensor(np.sort(idx), device=fr.device)
            vr = fr_flat[i, :, idx].transpose(0, 1)  # (n_pick, c)
            vf = ff_flat[i, :, idx].transpose(0, 1)
            attn = torch.softmax(vr @ vr.transpose(0, 1) / math.sqrt(c), dim=1)
            entropy = -(attn * torch.log(attn + 1e-12)).sum(dim=1)
            keep = min(n_keep, n_pick)
            sel = torch.topk(entropy, keep, largest=False).indices
            zr = attn[sel] @ vr
            zf = attn[sel] @ vf
            zr = F.normalize(heads[tap](zr), dim=1)
            zf = F.normalize(heads[tap](zf), dim=1)
            logits = zf @ zr.transpose(0, 1) / temperature
            target = torch.arange(keep, device=logits.device)
            total = total + F.cross_entropy(logits, target)
            n_terms += 1
    return total / max(1, n_terms)


def synthesis_generator_loss(nets: SynthesisNets, cfg: GeneratorConfig,
                             src_img, src_lbl, tgt_img, code_src, code_tgt, rng):
    """All generator-side terms for one (source, target) patch pair.

    src_img must already carry the label-assisted transformation. The
    translated source and the target identity pass run batched through the
    shared encoder/decoder. Returns (total, terms dict, detached synthetic
    patch for the discriminator step).
    """
    both = torch.cat([src_img, tgt_img], dim=0)
    feat, taps = nets.encoder(both, return_taps=True)
    codes = torch.stack([code_src, code_tgt]).to(both.dtype)
    gamma, beta = nets.controller(codes)
    outs = nets.dec_syn(feat, gamma, beta)
    fake = outs[:1]
    _, taps_out = nets.encoder(outs, return_taps=True)

    adv = lsgan_g_loss(nets.disc(fake))
    nce_src = qs_attn_nce([t[:1] for t in taps], [t[:1] for t in taps_out],
                          nets.heads, rng, cfg.nce_locations, cfg.nce_keep,
                          cfg.nce_temperature)
    nce_tgt = qs_attn_nce([t[1:] for t in taps], [t[1:] for t in taps_out],
                          nets.heads, rng, cfg.nce_locations, cfg.nce_keep,
                          cfg.nce_temperature)
    seg_dec = dice_ce_loss(nets.dec_seg(feat[:1]), src_lbl)
    seg_aux = dice_ce_loss(nets.snet(fake), src_lbl)
    edge = edge_loss(src_img, fake)

    total = (adv + nce_src + nce_tgt
             + cfg.lambda_seg_source * seg_dec
             + cfg.lambda_seg_synth * seg_aux
             + cfg.lambda_edge * edge)
    terms = {"g_adv": float(adv.detach()), "nce_src": float(nce_src.detach()),
             "nce_tgt": float(nce_tgt.detach()), "seg_dec": float(seg_dec.detach()),
             "seg_aux": float(seg_aux.detach()), "edge": float(edge.detach()),
             "g_total": float(total.detach())}
    return total, terms, fake.detach()


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _slab_patch(data, patch, rng):
    """Random patch origin; returns the slicing tuple."""
    starts = []
    for d, p in zip(data.shape, patch):
        if p >= d:
            starts.append(0)
        else:
            starts.append(int(rng.integers(0, d - p + 1)))
    return tuple(slice(s, s + p) for s, p in zip(starts, patch))


def _to_tensor(a, dtype=torch.float32):
    return torch.as_tensor(np.ascontiguousarray(a), dtype=dtype).unsqueeze(0).unsqueeze(0)


def one_hot_code(site_idx: int, n_sites: int) -> np.ndarray:
    code = np.zeros(n_sites, dtype=np.float64)
    code[site_idx] = 1.0
    return code


def train_synthesis(source_cases, target_cases, cfg: GeneratorConfig, seed: int,
                    out_dir=None, aug: AugmentConfig | None = None):
    """Train the translation networks on preprocessed cases.

    source_cases: list of (Volume, LabelMap); target_cases: list of
    (Volume, site_idx). Deterministic for a fixed seed. Returns
    (nets, history) where history is a list of (epoch, term, value).
    """
    if not source_cases or not target_cases:
        raise ValueError("need at least one source and one target case")
    aug = aug or AugmentConfig()
    ss = np.random.SeedSequence([int(seed), 0x5EED])
    torch_seed, = ss.spawn(1)[0].generate_state(1, dtype=np.uint64)
    torch.manual_seed(int(torch_seed))
    nets = SynthesisNets(cfg)

    snet_lr = cfg.snet_lr or cfg.lr
    disc_lr = cfg.disc_lr or cfg.lr
    opt_g = torch.optim.Adam(nets.generator_parameters(), lr=cfg.lr, betas=(0.5, 0.999))
    opt_s = torch.optim.Adam(nets.snet.parameters(), lr=snet_lr, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(nets.disc.parameters(), lr=disc_lr, betas=(0.5, 0.999))

    total_epochs = cfg.epochs_flat + cfg.epochs_decay
    n_steps = cfg.steps_per_epoch or max(len(source_cases), len(target_cases))
    history = []
    out_dir = Path(out_dir) if out_dir is not None else None

    for epoch in range(total_epochs):
        lr = lr_for_epoch(cfg, epoch)
        decay = lr / cfg.lr
        for opt, base in ((opt_g, cfg.lr), (opt_s, snet_lr), (opt_d, disc_lr)):
            for group in opt.param_groups:
                group["lr"] = base * decay
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1, epoch]))
        src_order = rng.permutation(len(source_cases))
        tgt_order = rng.permutation(len(target_cases))
        sums, counts = {}, {}

        for step in range(n_steps):
            src_img, src_lbl = source_cases[src_order[step % len(source_cases)]]
            tgt_img, tgt_site = target_cases[tgt_order[step % len(target_cases)]]

            sl = _slab_patch(src_img.data, cfg.patch_shape, rng)
            xs, ls = src_img.data[sl], src_lbl.data[sl]
            if rng.random() < aug.flip_prob:
                xs, ls = flip_lr(xs, ls)
            xs = augment_contrast(xs, aug.contrast_prob_source, rng,
                                  aug.contrast_gamma_range)
            xs = label_assisted_transform(xs, ls)

            sl = _slab_patch(tgt_img.data, cfg.patch_shape, rng)
            xt = tgt_img.data[sl]
            if rng.random() < aug.flip_prob:
                xt = np.ascontiguousarray(np.flip(xt, axis=0))
            xt = augment_contrast(xt, aug.contrast_prob_target, rng,
                                  aug.contrast_gamma_range)

            code_src = one_hot_code(int(rng.integers(cfg.code_dim)), cfg.code_dim)
            code_tgt = one_hot_code(int(tgt_site), cfg.code_dim)

            xs_t = _to_tensor(xs)
            ls_t = torch.as_tensor(np.ascontiguousarray(ls), dtype=torch.long).unsqueeze(0)
            xt_t = _to_tensor(xt)
            cs_t = torch.as_tensor(code_src, dtype=torch.float32)
            ct_t = torch.as_tensor(code_tgt, dtype=torch.float32)

            g_total, terms, fake = synthesis_generator_loss(
                nets, cfg, xs_t, ls_t, xt_t, cs_t, ct_t, rng)
            if not math.isfinite(float(g_total.detach())):
                raise RuntimeError(
                    f"non-finite generator loss at epoch {epoch} step {step}: {terms}")
            backward_total = g_total
            if cfg.snet_bootstrap:
                # trains only the auxiliary segmenter: the transformed source
                # already shows the target-style structure appearance, which
                # gives S a useful signal before the generator output does
                s_boot = dice_ce_loss(nets.snet(xs_t), ls_t)
                backward_total = backward_total + s_boot
                terms["s_boot"] = float(s_boot.detach())
            opt_g.zero_grad(set_to_none=True)
            opt_s.zero_grad(set_to_none=True)
            backward_total.backward()
            opt_g.step()
            opt_s.step()

            d_out = nets.disc(torch.cat([xt_t, fake], dim=0))
            d_loss = lsgan_d_loss(d_out[:1], d_out[1:])
            if not math.isfinite(float(d_loss.detach())):
                raise RuntimeError(
                    f"non-finite discriminator loss at epoch {epoch} step {step}")
            opt_d.zero_grad(set_to_none=True)
            d_loss.backward()
            opt_d.step()
            terms["d_loss"] = float(d_loss.detach())

            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v
                counts[k] = counts.get(k, 0) + 1

        for k in sorted(sums):
            history.append((epoch, k, sums[k] / counts[k]))
        history.append((epoch, "lr", lr))
        logger.info("synthesis epoch %d/%d g=%.4f d=%.4f", epoch + 1, total_epochs,
                    sums["g_total"] / counts["g_total"],
                    sums["d_loss"] / counts["d_loss"])
        if out_dir is not None and cfg.checkpoint_interval > 0 \
                and (epoch + 1) % cfg.checkpoint_interval == 0:
            save_checkpoint(nets, cfg, epoch,
                            {"g": opt_g, "s": opt_s, "d": opt_d},
                            out_dir / f"checkpoint_ep{epoch + 1:04d}.pt")

    if out_dir is not None:
        save_checkpoint(nets, cfg, total_epochs - 1,
                        {"g": opt_g, "s": opt_s, "d": opt_d},
                        out_dir / "checkpoint_final.pt")
        write_loss_csv(history, out_dir / "loss_trace.csv")
    return nets, history


def save_checkpoint(nets: SynthesisNets, cfg: GeneratorConfig, epoch,
                    optimizers, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "kind": "synthesis",
        "epoch": int(epoch),
        "config": asdict(cfg),
        "model": nets.state_dict(),
        "optimizers": {k: o.state_dict() for k, o in (optimizers or {}).items()},
    }
    torch.save(payload, path)


def load_checkpoint(path):
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("kind") != "synthesis":
        raise ValueError(f"not a synthesis checkpoint: {path}")
    cfg = GeneratorConfig(**payload["config"])
    nets = SynthesisNets(cfg)
    nets.load_state_dict(payload["model"])
    return nets, cfg, payload["epoch"]


def write_loss_csv(history, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "term", "value"])
        for epoch, term, value in history:
            w.writerow([epoch, term, f"{value:.8f}"])


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def translate(v_source: Volume, lbl: LabelMap, code, nets: SynthesisNets,
              cfg: GeneratorConfig | None = None):
    """Translate a full preprocessed source volume into a target-style one.

    Applies the label-assisted transformation, then runs overlapping
    sliding windows with linear cross-fade blending. Returns the synthetic
    volume plus the attached decoder's class probabilities.
    """
    cfg = cfg or nets.cfg
    data = v_source.data
    if data.min() < -1.0 - 1e-5 or data.max() > 1.0 + 1e-5:
        raise VolumeError("translate expects a preprocessed volume in [-1, 1]")
    transformed = label_assisted_transform(data, lbl.data)

    patch = tuple(min(p, d) for p, d in zip(cfg.patch_shape, data.shape))
    weights = weight_block(patch, triangular_profile)
    out = np.zeros(data.shape, dtype=np.float64)
    probs = np.zeros((4,) + data.shape, dtype=np.float64)
    wsum = np.zeros(data.shape, dtype=np.float64)

    code_t = torch.as_tensor(np.asarray(code), dtype=torch.float32)
    was_training = nets.training
    nets.eval()
    with torch.no_grad():
        gamma, beta = nets.controller(code_t)
        for origin in iter_windows(data.shape, patch):
            sl = tuple(slice(o, o + p) for o, p in zip(origin, patch))
            x = _to_tensor(transformed[sl])
            feat = nets.encoder(x)
            y = nets.dec_syn(feat, gamma, beta)[0, 0].numpy()
            p = F.softmax(nets.dec_seg(feat), dim=1)[0].numpy()
            out[sl] += y * weights
            probs[(slice(None),) + sl] += p * weights
            wsum[sl] += weights
    if was_training:
        nets.train()

    out /= wsum
    probs /= wsum
    probs /= probs.sum(axis=0, keepdims=True)
    site_id = None
    code_arr = np.asarray(code, dtype=np.float64)
    if code_arr.max() == 1.0 and np.count_nonzero(code_arr) == 1:
        site_id = f"S{int(np.argmax(code_arr))}"
    synth = Volume(out.astype(np.float32), v_source.spacing, v_source.orientation,
                   site_id=site_id, modality="synthetic-target")
    return synth, probs.astype(np.float32)
