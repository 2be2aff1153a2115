"""Two-scale refiner: global generator, local enhancer, feature-space
discriminator, and the staged adversarial training loop.

Both generators are residual: the global net predicts a correction added
to its input, the enhancer predicts a correction added to the upsampled
global output, and every correction head starts at zero.  An untrained
refiner therefore reproduces `reference_resample` of its input exactly,
and training starts from the identity rather than from noise.

Resolution scheme: the global generator runs at cfg.train_resolution R
(297 reproduces the published full-scale setting), the enhancer at 2R.
The enhancer's front-end halves its input back to R, where its features
are fused with the global back-end's last feature map by element-wise
sum, mirroring the coarse-to-fine pattern of pix2pixHD-style stacks.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as tf

from . import segmenter, styleloss
from .core import (
    DivergenceDetected,
    EmptyBatch,
    EmptyDataset,
    MaskMismatch,
    MissingFile,
    RefinerConfig,
    ShapeError,
    derive_seed,
    make_rng,
    validate_image,
)
from .percept import PerceptualNet, layer_channels
from .segmenter import ResidualUnit


def _np_to_tensor(image, dtype=torch.float32):
    return torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1).to(dtype)


def _tensor_to_np(t):
    return t.detach().permute(1, 2, 0).cpu().numpy().astype(np.float32)


def area_resize(image: np.ndarray, h: int, w: int) -> np.ndarray:
    """Exact area-average resize of an (H,W,3) image."""
    return segmenter.area_resample(np.asarray(image, dtype=np.float64), h, w).astype(np.float32)


def upsample2(t: torch.Tensor) -> torch.Tensor:
    return tf.interpolate(t, scale_factor=2, mode="bilinear", align_corners=False)


def reference_resample(image: np.ndarray, resolution: int) -> np.ndarray:
    """Canonical identity target: area-down to the global resolution, then
    bilinear up 2x to the enhancer resolution.  An identity-initialized
    refiner reproduces this exactly."""
    down = area_resize(validate_image(image), resolution, resolution)
    t = upsample2(_np_to_tensor(down)[None])[0]
    return _tensor_to_np(t)


def _soft_masks(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """(h,w,2) iris/pupil coverage for a class mask, exact area averages."""
    soft = segmenter.downsample_masks(mask, {"m": (h, w)})["m"]
    return soft


def _pad_multiple(t, factor):
    h, w = t.shape[-2:]
    ph, pw = (-h) % factor, (-w) % factor
    if ph or pw:
        t = tf.pad(t, (0, pw, 0, ph), mode="reflect")
    return t, (h, w)


class GlobalGenerator(nn.Module):
    """Front-end / residual blocks / back-end, predicting a residual
    correction at the global resolution."""

    def __init__(self, width=16, n_residual=3, seed=0):
        super().__init__()
        torch.manual_seed(derive_seed(seed, "g1-init"))
        w = width
        self.width = width
        self.front = nn.Sequential(
            nn.Conv2d(3, w, 7, padding=3, padding_mode="reflect"),
            nn.GroupNorm(1, w), nn.ReLU(inplace=True),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1),
            nn.GroupNorm(1, 2 * w), nn.ReLU(inplace=True),
            nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1),
            nn.GroupNorm(1, 4 * w), nn.ReLU(inplace=True),
        )
        self.residual = nn.Sequential(
            *[ResidualUnit(4 * w, zero_init=True) for _ in range(n_residual)]
        )
        self.back = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(4 * w, 2 * w, 3, padding=1),
            nn.GroupNorm(1, 2 * w), nn.ReLU(inplace=True),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(2 * w, w, 3, padding=1),
            nn.GroupNorm(1, w), nn.ReLU(inplace=True),
        )
        self.head = nn.Conv2d(w, 3, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x):
        """(B,3,H,W) -> (refined (B,3,H,W), back-end features (B,w,H,W))."""
        padded, (h, w) = _pad_multiple(x, 4)
        feat = self.back(self.residual(self.front(padded)))[:, :, :h, :w]
        out = torch.clamp(x + self.head(feat), 0.0, 1.0)
        return out, feat


class LocalEnhancer(nn.Module):
    """Enhancer operating at twice the global resolution.  Its stride-1
    front-end features are summed with the 2x-upsampled global back-end
    feature map, then refined by residual blocks and a zero-initialized
    correction head."""

    def __init__(self, fused_channels=16, width=8, n_residual=2, in_channels=5, seed=0):
        super().__init__()
        torch.manual_seed(derive_seed(seed, "g2-init"))
        self.in_channels = in_channels
        self.front = nn.Sequential(
            nn.Conv2d(in_channels, width, 7, padding=3, padding_mode="reflect"),
            nn.GroupNorm(1, width), nn.ReLU(inplace=True),
            nn.Conv2d(width, fused_channels, 3, padding=1),
            nn.GroupNorm(1, fused_channels), nn.ReLU(inplace=True),
        )
        self.residual = nn.Sequential(
            *[ResidualUnit(fused_channels, zero_init=True) for _ in range(n_residual)]
        )
        self.back = nn.Sequential(
            nn.Conv2d(fused_channels, width, 3, padding=1),
            nn.GroupNorm(1, width), nn.ReLU(inplace=True),
        )
        self.head = nn.Conv2d(width, 3, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x, g1_feat):
        front = self.front(x)
        fused = tf.interpolate(g1_feat, scale_factor=2, mode="nearest")
        if front.shape != fused.shape:
            raise ShapeError(
                f"fusion shapes differ: {tuple(front.shape)} vs {tuple(fused.shape)}"
            )
        return self.head(self.back(self.residual(front + fused)))


class Discriminator(nn.Module):
    """Trainable scoring head over fixed perceptual features concatenated
    with the semantic masks (color + semantics, one pathway for real and
    refined inputs alike)."""

    def __init__(self, extractor: PerceptualNet, layer="conv2_2", width=16,
                 zero_head=False, seed=0):
        super().__init__()
        torch.manual_seed(derive_seed(seed, "disc-init"))
        self._extractor = (extractor,)   # tuple keeps it out of parameters()
        self.layer = layer
        c_in = layer_channels(layer, extractor.width) + 2
        self.net = nn.Sequential(
            nn.Conv2d(c_in, width, 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, width, 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, 1, 3, padding=1),
        )
        if zero_head:
            for mod in self.net:
                if isinstance(mod, nn.Conv2d):
                    nn.init.zeros_(mod.weight)
                    nn.init.zeros_(mod.bias)

    @property
    def extractor(self):
        return self._extractor[0]

    def forward(self, image, masks):
        """image (B,3,H,W), masks (B,2,H,W) -> scores (B,1,h_tap,w_tap)."""
        taps = self.extractor.feature_maps(image, [self.layer])[self.layer]
        m = tf.interpolate(masks, size=taps.shape[-2:], mode="bilinear",
                           align_corners=False)
        return self.net(torch.cat([taps, m], dim=1))


def gan_objective(scores_real, scores_refined):
    """Least-squares adversarial losses.

    loss_D = (E[(s_real - 1)^2] + E[s_fake^2]) / 2, loss_G = E[(s_fake - 1)^2].
    """
    sr = torch.as_tensor(scores_real)
    sf = torch.as_tensor(scores_refined)
    if sr.numel() == 0 or sf.numel() == 0:
        raise EmptyBatch("gan_objective needs nonempty score sets")
    loss_d = 0.5 * (((sr - 1.0) ** 2).mean() + (sf ** 2).mean())
    loss_g = ((sf - 1.0) ** 2).mean()
    return loss_d, loss_g


@dataclass(frozen=True)
class StageSchedule:
    """Iteration counts and step sizes for the three training stages."""

    stage1_iters: int = 300
    stage2_iters: int = 200
    stage3_iters: int = 200
    stage1_step: float = 2e-4
    stage2_step: float = 2e-4
    stage3_step: float = 2e-5

    def __post_init__(self):
        for f in ("stage1_iters", "stage2_iters", "stage3_iters"):
            if getattr(self, f) < 0:
                raise ValueError(f"{f} must be >= 0")

    @classmethod
    def from_config(cls, cfg: RefinerConfig):
        return cls(cfg.stage1_iters, cfg.stage2_iters, cfg.stage3_iters,
                   cfg.step_size, cfg.step_size, cfg.step_size * 0.1)


@dataclass
class RefinerNets:
    """The generator pair plus discriminator and the global resolution."""

    g1: GlobalGenerator
    g2: LocalEnhancer
    disc: Discriminator
    resolution: int

    def eval(self):
        self.g1.eval()
        self.g2.eval()
        self.disc.eval()
        return self


def build_refiner(cfg: RefinerConfig, extractor: PerceptualNet,
                  g1_width=16, g2_width=8) -> RefinerNets:
    g1 = GlobalGenerator(width=g1_width, seed=cfg.seed)
    g2 = LocalEnhancer(fused_channels=g1_width, width=g2_width, seed=cfg.seed)
    disc = Discriminator(extractor, layer=cfg.disc_layer, seed=cfg.seed)
    return RefinerNets(g1=g1, g2=g2, disc=disc, resolution=cfg.train_resolution)


def generate_global(g1: GlobalGenerator, image: np.ndarray, resolution: int):
    """Refine at the global resolution; returns (image, back-end features)."""
    image = validate_image(image)
    x = _np_to_tensor(area_resize(image, resolution, resolution))[None]
    with torch.no_grad():
        out, feat = g1(x)
    return _tensor_to_np(out[0]), feat[0].numpy()


def _enhancer_input(image, mask, resolution):
    big = area_resize(validate_image(image), 2 * resolution, 2 * resolution)
    if mask is None:
        soft = np.zeros((2 * resolution, 2 * resolution, 2), np.float32)
    else:
        if mask.shape != image.shape[:2]:
            raise MaskMismatch(f"mask {mask.shape} vs image {image.shape[:2]}")
        soft = _soft_masks(mask, 2 * resolution, 2 * resolution)
    return np.concatenate([big, soft], axis=-1)


def _generate_tensor(nets: RefinerNets, enh_in: torch.Tensor):
    """Differentiable full-pipeline output from a (B,5,2R,2R) input."""
    small = tf.avg_pool2d(enh_in[:, :3], 2)
    o1, feat = nets.g1(small)
    res = nets.g2(enh_in, feat)
    return torch.clamp(upsample2(o1) + res, 0.0, 1.0), o1


def generate(nets: RefinerNets, image: np.ndarray, mask=None) -> np.ndarray:
    """Refined image at the enhancer resolution (2x global)."""
    enh = _enhancer_input(image, mask, nets.resolution)
    with torch.no_grad():
        out, _ = _generate_tensor(nets, _np_to_tensor(enh)[None])
    return _tensor_to_np(out[0])


def discriminate(disc: Discriminator, image: np.ndarray, mask=None) -> np.ndarray:
    """Per-patch realism scores for one image."""
    image = validate_image(image)
    h, w = image.shape[:2]
    if mask is None:
        soft = np.zeros((h, w, 2), np.float32)
    else:
        if mask.shape != image.shape[:2]:
            raise MaskMismatch(f"mask {mask.shape} vs image {image.shape[:2]}")
        soft = _soft_masks(mask, h, w)
    with torch.no_grad():
        s = disc(_np_to_tensor(image)[None], _np_to_tensor(soft)[None])
    return s[0, 0].numpy()


# ---------------------------------------------------------------------------
# training

def _prep(samples, resolution, seg_net):
    """Per-sample cached arrays at the global and enhancer resolutions."""
    prepped = []
    for s in samples:
        mask = s.mask
        if mask is None and seg_net is not None:
            mask = segmenter.repair_orphans(segmenter.segment(seg_net, s.image))
        if mask is None:
            raise MaskMismatch("sample without mask and no segmenter provided")
        mask = segmenter.repair_orphans(mask)
        entry = {
            "small": area_resize(s.image, resolution, resolution),
            "big": area_resize(s.image, 2 * resolution, 2 * resolution),
            # loss anchor at the enhancer scale: the canonical resample,
            # i.e. what an untrained refiner emits; regularizing against it
            # measures distortion added by training, not upsampling blur
            "anchor_big": reference_resample(s.image, resolution),
            "enh_in": _enhancer_input(s.image, mask, resolution),
            "mask": mask,
        }
        # class mask resampled by majority vote for the loss module
        entry["mask_small"] = _harden(_soft_masks(mask, resolution, resolution))
        entry["mask_big"] = _harden(_soft_masks(mask, 2 * resolution, 2 * resolution))
        prepped.append(entry)
    return prepped


def _harden(soft: np.ndarray) -> np.ndarray:
    """Soft (h,w,2) coverage -> uint8 class mask by dominant class."""
    bg = 1.0 - soft.sum(axis=-1)
    stack = np.concatenate([bg[:, :, None], soft], axis=-1)
    return np.argmax(stack, axis=-1).astype(np.uint8)


def train(nets: RefinerNets, synthetic, real, cfg: RefinerConfig,
          schedule: StageSchedule = None, seg_net=None, out_dir=None,
          batch_size=2, ckpt_every=100, extractor: PerceptualNet = None):
    """Run the three stages; returns (nets, history).

    Per iteration: the discriminator sees real vs refined batches, then the
    generator takes one step on adv_weight * loss_G_adv plus
    transfer_weight * mean L_total.  Style references are sampled uniformly
    from the real set; content and the photorealism regularizer are
    anchored to the synthetic input as the generator receives it (the
    global-resolution image in stage 1, its canonical resample at the
    enhancer scale afterwards).  History rows carry every loss term; a CSV
    lands in out_dir/losses.csv.
    """
    if not synthetic:
        raise EmptyDataset("no synthetic samples")
    if not real:
        raise EmptyDataset("no real samples")
    schedule = schedule or StageSchedule.from_config(cfg)
    extractor = extractor or nets.disc.extractor
    res = nets.resolution

    syn = _prep(synthetic, res, seg_net)
    rea = _prep(real, res, seg_net)
    matting_cache = {}

    def matting_of(kind, idx, which):
        key = (kind, idx, which)
        if key not in matting_cache:
            bank = syn if kind == "syn" else rea
            matting_cache[key] = styleloss.matting_laplacian(
                bank[idx][which], eps=cfg.matting_eps
            )
        return matting_cache[key]

    rng = make_rng(cfg.seed, "refiner-train")
    history = []
    writer = None
    if out_dir is not None:
        os.makedirs(os.path.join(out_dir, "refiner"), exist_ok=True)
        writer = styleloss.LossWriter(os.path.join(out_dir, "losses.csv"),
                                      adversarial=True)

    def save_ckpt(stage, iteration):
        # iteration is the global count, so names stay unique across stages
        if out_dir is None:
            return
        path = os.path.join(out_dir, "refiner", f"stage{stage}_iter{iteration}.ckpt")
        save_refiner(nets, path)

    adversarial = cfg.adv_weight > 0
    total_iter = 0
    for stage, (iters, step) in enumerate([
        (schedule.stage1_iters, schedule.stage1_step),
        (schedule.stage2_iters, schedule.stage2_step),
        (schedule.stage3_iters, schedule.stage3_step),
    ], start=1):
        if iters == 0:
            continue
        if stage == 1:
            gen_params = list(nets.g1.parameters())
        elif stage == 2:
            for p in nets.g1.parameters():
                p.requires_grad_(False)
            gen_params = list(nets.g2.parameters())
        else:
            for p in nets.g1.parameters():
                p.requires_grad_(True)
            gen_params = list(nets.g1.parameters()) + list(nets.g2.parameters())
        opt_g = torch.optim.Adam(gen_params, lr=step) if (
            adversarial or cfg.transfer_weight > 0) else None
        opt_d = torch.optim.Adam(nets.disc.parameters(), lr=step) if adversarial else None

        for it in range(1, iters + 1):
            total_iter += 1
            idx = rng.integers(len(syn), size=batch_size)
            ref_idx = rng.integers(len(rea), size=batch_size)

            outputs = _forward_batch(nets, syn, idx, stage)

            loss_d_val = 0.0
            loss_g_adv = torch.zeros(())
            if adversarial:
                which_real = "small" if stage == 1 else "big"
                which_mask = "mask_small" if stage == 1 else "mask_big"
                real_imgs = torch.stack([
                    _np_to_tensor(rea[j][which_real]) for j in ref_idx
                ])
                real_masks = torch.stack([
                    _np_to_tensor(_soft_masks(rea[j][which_mask],
                                              *rea[j][which_real].shape[:2]))
                    for j in ref_idx
                ])
                fake_masks = torch.stack([
                    _np_to_tensor(_soft_masks(
                        syn[i]["mask_small" if stage == 1 else "mask_big"],
                        *outputs.shape[-2:]))
                    for i in idx
                ])
                s_real = nets.disc(real_imgs, real_masks)
                s_fake_d = nets.disc(outputs.detach(), fake_masks)
                loss_d, _ = gan_objective(s_real, s_fake_d)
                if not torch.isfinite(loss_d):
                    raise DivergenceDetected(
                        f"discriminator loss {float(loss_d.detach())} "
                        f"at stage {stage} iter {it}"
                    )
                opt_d.zero_grad()
                loss_d.backward()
                opt_d.step()
                loss_d_val = float(loss_d.detach())
                s_fake_g = nets.disc(outputs, fake_masks)
                _, loss_g_adv = gan_objective(s_real.detach(), s_fake_g)

            terms_acc = None
            loss_transfer = torch.zeros(())
            if cfg.transfer_weight > 0:
                per_sample = []
                for b, i in enumerate(idx):
                    anchor = "small" if stage == 1 else "anchor_big"
                    inp = syn[i][anchor]
                    ref = rea[ref_idx[b]]["small" if stage == 1 else "big"]
                    in_mask = syn[i]["mask_small" if stage == 1 else "mask_big"]
                    st_mask = rea[ref_idx[b]]["mask_small" if stage == 1 else "mask_big"]
                    loss_b, terms = styleloss.style_objective(
                        outputs[b], inp, ref, extractor, cfg,
                        input_mask=in_mask, style_mask=st_mask,
                        matting=matting_of("syn", int(i), anchor),
                    )
                    per_sample.append(loss_b)
                    terms_acc = _accumulate_terms(terms_acc, terms)
                loss_transfer = torch.stack(per_sample).mean()
                terms_acc = _scale_terms(terms_acc, 1.0 / len(idx))

            if opt_g is not None:
                loss_g = cfg.adv_weight * loss_g_adv + cfg.transfer_weight * loss_transfer
                if not torch.isfinite(loss_g):
                    raise DivergenceDetected(
                        f"generator loss {float(loss_g.detach())} "
                        f"at stage {stage} iter {it}"
                    )
                opt_g.zero_grad()
                loss_g.backward()
                opt_g.step()
                loss_g_val = float(loss_g.detach())
            else:
                loss_g_val = 0.0

            if terms_acc is None:
                terms_acc = styleloss.StyleLossTerms({}, {}, {}, 0.0, 0.0, 0.0, 0.0)
            adv_val = float(loss_g_adv.detach())
            row = {
                "iter": total_iter, "stage": stage,
                "loss_D": loss_d_val, "loss_G_adv": adv_val,
                "loss_G": loss_g_val, "terms": terms_acc,
            }
            history.append(row)
            if writer is not None:
                writer.write(total_iter, terms_acc, loss_d=loss_d_val,
                             loss_g_adv=adv_val)
            if it % ckpt_every == 0 or it == iters:
                save_ckpt(stage, total_iter)

    nets.eval()
    return nets, history


def _forward_batch(nets, syn, idx, stage):
    if stage == 1:
        x = torch.stack([_np_to_tensor(syn[i]["small"]) for i in idx])
        out, _ = nets.g1(x)
        return out
    enh = torch.stack([_np_to_tensor(syn[i]["enh_in"]) for i in idx])
    out, _ = _generate_tensor(nets, enh)
    return out


def _accumulate_terms(acc, terms):
    if acc is None:
        return terms
    add = lambda a, b: {k: a.get(k, 0.0) + b.get(k, 0.0) for k in set(a) | set(b)}
    return styleloss.StyleLossTerms(
        per_layer_global=add(acc.per_layer_global, terms.per_layer_global),
        per_layer_local=add(acc.per_layer_local, terms.per_layer_local),
        per_layer_style=add(acc.per_layer_style, terms.per_layer_style),
        style_weighted=acc.style_weighted + terms.style_weighted,
        content=acc.content + terms.content,
        matting=acc.matting + terms.matting,
        total=acc.total + terms.total,
    )


def _scale_terms(terms, k):
    scale = lambda d: {n: v * k for n, v in d.items()}
    return styleloss.StyleLossTerms(
        per_layer_global=scale(terms.per_layer_global),
        per_layer_local=scale(terms.per_layer_local),
        per_layer_style=scale(terms.per_layer_style),
        style_weighted=terms.style_weighted * k,
        content=terms.content * k,
        matting=terms.matting * k,
        total=terms.total * k,
    )


# ---------------------------------------------------------------------------
# persistence and batch refinement

def save_refiner(nets: RefinerNets, path) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    torch.save({
        "g1": nets.g1.state_dict(),
        "g2": nets.g2.state_dict(),
        "disc": nets.disc.state_dict(),
        "resolution": nets.resolution,
        "g1_width": nets.g1.width,
        "disc_layer": nets.disc.layer,
        "extractor_width": nets.disc.extractor.width,
    }, path)


def load_refiner(path, extractor: PerceptualNet = None) -> RefinerNets:
    if not os.path.exists(path):
        raise MissingFile(path)
    blob = torch.load(path, weights_only=True)
    g1 = GlobalGenerator(width=blob["g1_width"])
    g1.load_state_dict(blob["g1"])
    g2_front_width = blob["g2"]["front.0.weight"].shape[0]
    g2 = LocalEnhancer(fused_channels=blob["g1_width"], width=g2_front_width)
    g2.load_state_dict(blob["g2"])
    if extractor is None:
        extractor = PerceptualNet(width=blob["extractor_width"])
    disc = Discriminator(extractor, layer=blob["disc_layer"])
    disc.load_state_dict(blob["disc"])
    nets = RefinerNets(g1=g1, g2=g2, disc=disc, resolution=blob["resolution"])
    return nets.eval()


def refine_batch(nets: RefinerNets, manifest_path, out_dir, seg_net=None) -> str:
    """Refine every manifest row; gaze labels are copied verbatim and the
    domain becomes `refined`.  Returns the output manifest path."""
    from . import core

    rows = core.read_manifest(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    os.makedirs(out_dir, exist_ok=True)
    out_rows = []
    for i, row in enumerate(rows):
        img_path = row["image_path"]
        if not os.path.isabs(img_path):
            img_path = os.path.join(base, img_path)
        image = core.load_image(img_path)
        mask = None
        if (row.get("mask_path") or "").strip():
            mp = row["mask_path"]
            mask = core.load_mask(mp if os.path.isabs(mp) else os.path.join(base, mp))
        elif seg_net is not None:
            mask = segmenter.repair_orphans(segmenter.segment(seg_net, image))
        refined = generate(nets, image, mask)
        name = f"refined_{i:04d}.png"
        core.save_image(refined, os.path.join(out_dir, name))
        out_row = dict(row)
        out_row["image_path"] = name
        out_row["domain"] = "refined"
        if mask is not None:
            mask_name = f"refined_mask_{i:04d}.png"
            core.save_mask(mask, os.path.join(out_dir, mask_name))
            out_row["mask_path"] = mask_name
        else:
            out_row["mask_path"] = ""
        out_rows.append(out_row)
    out_manifest = os.path.join(out_dir, "manifest.csv")
    core.write_manifest(out_manifest, out_rows)
    return out_manifest
