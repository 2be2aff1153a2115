"""Background/iris/pupil segmentation with residual encoder-decoder,
orphan-pupil repair, and exact area-averaged mask pyramids.

The repair step enforces the structural prior that a pupil only exists
inside an iris: the output pupil is re-rasterized as an area-preserving
disk of pixels nearest the (hole-filled) iris region's centroid.  The disk
is restricted to the eroded interior so a one-pixel iris ring always
survives around it, which is what makes the operation exactly idempotent.
"""

from __future__ import annotations

import os

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as tf
from scipy.ndimage import binary_erosion, binary_fill_holes

from .core import (
    DivergenceDetected,
    EmptyDataset,
    MissingFile,
    ShapeError,
    derive_seed,
    validate_image,
    validate_mask,
)

DOWNSAMPLE_FACTOR = 8
MASK_CLASSES = ("iris", "pupil")  # channel order of soft-mask arrays


def area_resample(field: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resample (H,W) or (H,W,C) by exact area averaging.

    Output cell (i,j) is the mean of `field` over the rectangle
    [i*H/out_h, (i+1)*H/out_h] x [j*W/out_w, (j+1)*W/out_w].  Computed from
    the integral image; bilinear interpolation of the integral at fractional
    coordinates is exact for piecewise-constant fields, so this is the true
    box average, not an approximation.
    """
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bad output size ({out_h}, {out_w})")
    arr = np.asarray(field, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ShapeError(f"expected 2D or 3D field, got shape {field.shape}")
    h, w, c = arr.shape
    integral = np.zeros((h + 1, w + 1, c), dtype=np.float64)
    np.cumsum(np.cumsum(arr, axis=0), axis=1, out=integral[1:, 1:])

    def interp(table, coords, axis):
        idx = np.floor(coords).astype(np.int64)
        frac = coords - idx
        hi = np.minimum(idx + 1, table.shape[axis] - 1)
        lo_v = np.take(table, idx, axis=axis)
        hi_v = np.take(table, hi, axis=axis)
        shape = [1] * table.ndim
        shape[axis] = len(coords)
        f = frac.reshape(shape)
        return lo_v * (1.0 - f) + hi_v * f

    by = np.linspace(0.0, h, out_h + 1)
    bx = np.linspace(0.0, w, out_w + 1)
    grid = interp(interp(integral, by, 0), bx, 1)
    sums = grid[1:, 1:] - grid[:-1, 1:] - grid[1:, :-1] + grid[:-1, :-1]
    out = sums / ((h / out_h) * (w / out_w))
    return out[:, :, 0] if squeeze else out


def downsample_masks(mask: np.ndarray, layer_sizes: dict) -> dict:
    """Per-layer soft masks for iris and pupil via exact area averaging.

    Returns {layer: (h, w, 2) float32}; channel sum <= 1 everywhere, with
    background implied as the remainder.
    """
    mask = validate_mask(mask)
    indicators = np.stack([mask == 1, mask == 2], axis=-1).astype(np.float64)
    out = {}
    for name, (h, w) in layer_sizes.items():
        soft = area_resample(indicators, int(h), int(w))
        out[name] = np.clip(soft, 0.0, 1.0).astype(np.float32)
    return out


def repair_orphans(mask: np.ndarray) -> np.ndarray:
    """Re-rasterize the pupil as a centered disk inside the iris region.

    Support = hole-filled iris pixels.  The new pupil keeps the input pupil
    area (clipped to the eroded interior) and consists of the interior
    pixels nearest the support centroid, with a deterministic (d^2, row,
    col) tie-break.  Pupil pixels outside the support become background;
    with no iris at all, every pupil pixel becomes background.
    """
    mask = validate_mask(mask)
    out = np.where(mask == 2, 0, mask).astype(np.uint8)
    iris = mask == 1
    n_pupil = int((mask == 2).sum())
    if not iris.any():
        return out
    support = binary_fill_holes(iris)
    out[support] = 1
    interior = binary_erosion(support)
    target = min(n_pupil, int(interior.sum()))
    if target > 0:
        sy, sx = np.nonzero(support)
        cy, cx = sy.mean(), sx.mean()
        ys, xs = np.nonzero(interior)
        d2 = (ys - cy) ** 2 + (xs - cx) ** 2
        pick = np.lexsort((xs, ys, d2))[:target]
        out[ys[pick], xs[pick]] = 2
    return out


class ResidualUnit(nn.Module):
    """x -> relu(x + F(x)) with F = conv-norm-relu-conv.

    With `zero_init` the closing conv starts at zero, so the unit begins as
    a rectified identity regardless of the other weights.
    """

    def __init__(self, channels, zero_init=False):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm = nn.GroupNorm(1, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        if zero_init:
            nn.init.zeros_(self.conv2.weight)
            nn.init.zeros_(self.conv2.bias)

    def forward(self, x):
        branch = self.conv2(tf.relu(self.norm(self.conv1(x))))
        return tf.relu(x + branch)


def _conv_block(c_in, c_out, stride=1):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1),
        nn.GroupNorm(1, c_out),
        nn.ReLU(inplace=True),
    )


class SegmenterNet(nn.Module):
    """3-stage stride-2 encoder, 8 residual units at the bottleneck,
    mirrored upsampling decoder, 3-class per-pixel head."""

    def __init__(self, width=16, zero_head=False):
        super().__init__()
        w = width
        self.width = width
        self.stem = _conv_block(3, w)
        self.enc = nn.ModuleList([
            _conv_block(w, 2 * w, stride=2),
            _conv_block(2 * w, 4 * w, stride=2),
            _conv_block(4 * w, 8 * w, stride=2),
        ])
        self.bottleneck = nn.Sequential(*[ResidualUnit(8 * w) for _ in range(8)])
        self.dec = nn.ModuleList([
            _conv_block(8 * w, 4 * w),
            _conv_block(4 * w, 2 * w),
            _conv_block(2 * w, w),
        ])
        self.head = nn.Conv2d(w, 3, 1)
        if zero_head:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(self, x):
        if x.shape[-1] % DOWNSAMPLE_FACTOR or x.shape[-2] % DOWNSAMPLE_FACTOR:
            raise ShapeError(
                f"spatial size {tuple(x.shape[-2:])} not divisible by {DOWNSAMPLE_FACTOR}"
            )
        h = self.stem(x)
        skips = [h]
        for block in self.enc:
            h = block(h)
            skips.append(h)
        h = self.bottleneck(h)
        # Mirrored decoder with additive skips from the matching resolution.
        for block, skip in zip(self.dec, reversed(skips[:-1])):
            h = tf.interpolate(h, scale_factor=2, mode="nearest")
            h = block(h) + skip
        return self.head(h)

    def probabilities(self, x):
        return torch.softmax(self.forward(x), dim=1)


def _pad_to_factor(t):
    h, w = t.shape[-2:]
    ph = (-h) % DOWNSAMPLE_FACTOR
    pw = (-w) % DOWNSAMPLE_FACTOR
    if ph or pw:
        t = tf.pad(t, (0, pw, 0, ph), mode="reflect")
    return t, (h, w)


def segment(net: SegmenterNet, image: np.ndarray) -> np.ndarray:
    """Argmax class mask at the input's resolution (ties -> lowest class)."""
    image = validate_image(image)
    t = torch.from_numpy(image).permute(2, 0, 1)[None]
    t, (h, w) = _pad_to_factor(t)
    with torch.no_grad():
        scores = net(t)[0, :, :h, :w].numpy()
    return np.argmax(scores, axis=0).astype(np.uint8)


def train_segmenter(dataset, epochs, cfg, out_dir=None, width=16, batch_size=16,
                    min_steps_per_epoch=8):
    """Cross-entropy training on (image, mask) pairs.

    Classes are weighted by inverse pixel frequency (pupils are a few
    percent of pixels and go undiscovered otherwise).  Tiny datasets are
    cycled so every epoch performs at least min_steps_per_epoch updates.
    Writes `segmenter/epoch_{N}.ckpt` plus a `latest` pointer when out_dir
    is given.  Per-epoch mean losses land on net.history.
    """
    if not dataset:
        raise EmptyDataset("train_segmenter needs at least one sample")
    images = torch.stack([
        torch.from_numpy(validate_image(img)).permute(2, 0, 1) for img, _ in dataset
    ])
    labels = torch.stack([
        torch.from_numpy(validate_mask(m).astype(np.int64)) for _, m in dataset
    ])
    images, _ = _pad_to_factor(images)
    labels, _ = _pad_to_factor(labels[:, None].float())
    labels = labels[:, 0].long()

    freq = np.bincount(labels.numpy().ravel(), minlength=3) / labels.numel()
    weight = 1.0 / np.maximum(freq, 1e-3)
    weight = torch.tensor(np.minimum(weight / weight.min(), 32.0), dtype=torch.float32)

    torch.manual_seed(derive_seed(cfg.seed, "segmenter-init"))
    net = SegmenterNet(width=width)
    opt = torch.optim.Adam(net.parameters(), lr=1e-3)
    gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "segmenter-order"))
    n = len(dataset)
    steps = max(int(np.ceil(n / batch_size)), min_steps_per_epoch)
    history = []
    for epoch in range(epochs):
        order = torch.cat([
            torch.randperm(n, generator=gen)
            for _ in range(int(np.ceil(steps * batch_size / n)))
        ])[:steps * batch_size]
        total = 0.0
        count = 0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            opt.zero_grad()
            loss = tf.cross_entropy(net(images[idx]), labels[idx], weight=weight)
            if not torch.isfinite(loss):
                raise DivergenceDetected(f"segmenter loss {loss.item()} at epoch {epoch}")
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        history.append(total / count)
        if out_dir is not None:
            ckpt_dir = os.path.join(out_dir, "segmenter")
            os.makedirs(ckpt_dir, exist_ok=True)
            name = f"epoch_{epoch + 1}.ckpt"
            torch.save({"state": net.state_dict(), "width": width},
                       os.path.join(ckpt_dir, name))
            with open(os.path.join(ckpt_dir, "latest"), "w") as fh:
                fh.write(name + "\n")
    net.eval()
    net.history = history
    return net


def load_segmenter(path) -> SegmenterNet:
    """Load a checkpoint file, or a directory containing segmenter/latest."""
    if os.path.isdir(path):
        sub = os.path.join(path, "segmenter")
        base = sub if os.path.isdir(sub) else path
        pointer = os.path.join(base, "latest")
        if not os.path.exists(pointer):
            raise MissingFile(pointer)
        with open(pointer) as fh:
            path = os.path.join(base, fh.read().strip())
    if not os.path.exists(path):
        raise MissingFile(path)
    blob = torch.load(path, weights_only=True)
    net = SegmenterNet(width=blob["width"])
    net.load_state_dict(blob["state"])
    net.eval()
    return net
