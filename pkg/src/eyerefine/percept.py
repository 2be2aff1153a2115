"""Fixed perceptual feature extractor and cascaded-refinement decoder.

The extractor follows the classic 19-layer topology: five convolutional
modules of (2, 2, 4, 4, 4) 3x3 conv+ReLU layers with average pooling in
between, giving 16 named post-ReLU taps conv1_1 .. conv5_4.  Channel
widths are `width * (1, 2, 4, 8, 8)` per module; `width=64` reproduces the
standard network so published pretrained weights drop in via the flat
binary format below, while smaller widths give cheap seeded-random
extractors for tests (invariants here do not depend on the statistics of
the weights, only on the topology).

Weight file format (little-endian), one record per parameter, in
`named_parameters` order:

    u32 name_len | name utf-8 | u32 rank | u32 dims[rank] | float32 data (C order)

Parameter names are `conv{m}_{i}.weight` / `.bias`.
"""

from __future__ import annotations

import struct

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as tf

from .core import (
    PERCEPT_LAYERS,
    InvalidWeight,
    MissingFile,
    MissingLayer,
    ShapeError,
    UnknownLayer,
    UnsupportedFormat,
    derive_seed,
    make_rng,
    validate_image,
)

BLOCKS = (2, 2, 4, 4, 4)
WIDTH_MULTIPLIERS = (1, 2, 4, 8, 8)

# Published topology table: tap -> (channel multiplier, downsample factor).
# Asserted at load time against the actual parameter shapes.
LAYER_TABLE = {}
for _m, (_n, _mult) in enumerate(zip(BLOCKS, WIDTH_MULTIPLIERS), start=1):
    for _i in range(1, _n + 1):
        LAYER_TABLE[f"conv{_m}_{_i}"] = (_mult, 2 ** (_m - 1))
assert tuple(LAYER_TABLE) == PERCEPT_LAYERS


def layer_channels(name: str, width: int = 64) -> int:
    if name not in LAYER_TABLE:
        raise UnknownLayer(name)
    return LAYER_TABLE[name][0] * width


def layer_scale(name: str) -> int:
    """Downsampling factor of a tap relative to the input image."""
    if name not in LAYER_TABLE:
        raise UnknownLayer(name)
    return LAYER_TABLE[name][1]


class PerceptualNet(nn.Module):
    """Immutable five-module extractor with named post-ReLU taps."""

    def __init__(self, width: int = 64, seed: int = 0):
        super().__init__()
        self.width = width
        convs = {}
        rng = make_rng(seed, "percept-init")
        c_in = 3
        for m, (n_layers, mult) in enumerate(zip(BLOCKS, WIDTH_MULTIPLIERS), start=1):
            c_out = mult * width
            for i in range(1, n_layers + 1):
                conv = nn.Conv2d(c_in, c_out, 3, padding=1)
                # He-scaled seeded init keeps activation magnitude stable
                # through 16 rectified layers.  Biases are random rather
                # than zero: a zero-bias rectified stack is positively
                # homogeneous, which makes its Gram statistics blind to
                # global intensity; trained extractors are not.
                std = np.sqrt(2.0 / (c_in * 9))
                w = rng.standard_normal(size=conv.weight.shape) * std
                b = rng.uniform(-0.2, 0.2, size=c_out)
                with torch.no_grad():
                    conv.weight.copy_(torch.from_numpy(w))
                    conv.bias.copy_(torch.from_numpy(b))
                convs[f"conv{m}_{i}"] = conv
                c_in = c_out
        self.convs = nn.ModuleDict(convs)
        self.pool = nn.AvgPool2d(2)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def feature_maps(self, x: torch.Tensor, layers) -> dict:
        """Differentiable taps for a (B,3,H,W) tensor; stops at the deepest
        requested layer."""
        unknown = [name for name in layers if name not in LAYER_TABLE]
        if unknown:
            raise UnknownLayer(unknown[0])
        wanted = set(layers)
        if not wanted:
            return {}
        names = list(LAYER_TABLE)
        deepest = max(names.index(n) for n in wanted)
        out = {}
        h = x
        for idx, name in enumerate(names):
            if name.endswith("_1") and not name.startswith("conv1"):
                h = self.pool(h)
            if min(h.shape[-2:]) < 1:
                raise ShapeError(f"input too small for layer {name}")
            h = tf.relu(self.convs[name](h))
            if name in wanted:
                out[name] = h
            if idx == deepest:
                break
        return out


def extract_features(net: PerceptualNet, image: np.ndarray, layers) -> dict:
    """Feature stack {layer: (C,h,w) float32} for one image."""
    image = validate_image(image)
    for name in layers:
        if name not in LAYER_TABLE:
            raise UnknownLayer(name)
        scale = layer_scale(name)
        if min(image.shape[:2]) < scale:
            raise ShapeError(
                f"min side {min(image.shape[:2])} too small for {name} (needs >= {scale})"
            )
    t = torch.from_numpy(image).permute(2, 0, 1)[None]
    if next(net.parameters()).dtype == torch.float64:
        t = t.double()
    with torch.no_grad():
        maps = net.feature_maps(t, layers)
    return {name: maps[name][0].numpy().astype(np.float32) for name in maps}


def instance_average_pool(features: dict, masks: dict) -> dict:
    """Replace features inside each masked region by the region's
    mask-weighted mean; positions not covered by any mask pass through.

    features: {layer: (C,h,w)}; masks: {layer: (h,w,K)}.  A position
    belongs to its dominant (argmax, ties -> lowest index) class; the
    region mean weights positions by their mask value.  Full replacement
    per region makes the operation idempotent even for fractional masks.
    Layers without a mask entry are returned unchanged.
    """
    out = {}
    for name, feat in features.items():
        feat = np.asarray(feat)
        if name not in masks:
            out[name] = feat.copy()
            continue
        m = np.asarray(masks[name], dtype=feat.dtype)
        if m.ndim != 3 or m.shape[:2] != feat.shape[1:]:
            raise ShapeError(f"mask shape {m.shape} vs features {feat.shape} at {name}")
        covered = m.sum(axis=-1) > 0
        if not covered.any():
            out[name] = feat.copy()
            continue
        assign = np.argmax(m, axis=-1)
        pooled = feat.copy()
        for c in range(m.shape[-1]):
            region = covered & (assign == c)
            if not region.any():
                continue
            w = m[:, :, c] * region
            total = w.sum()
            if total == 0:
                continue
            mean_c = (feat * w).sum(axis=(1, 2)) / total
            pooled[:, region] = mean_c[:, None]
        out[name] = pooled
    return out


# ---------------------------------------------------------------------------
# weight file IO

def save_weights(net: PerceptualNet, path) -> None:
    tensors = [
        (name.removeprefix("convs."), p.detach().numpy().astype("<f4"))
        for name, p in net.named_parameters()
    ]
    _write_records(tensors, path)


def _write_records(tensors, path):
    with open(path, "wb") as fh:
        for name, arr in tensors:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_records(path) -> dict:
    import os
    if not os.path.exists(path):
        raise MissingFile(path)
    blobs = {}
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0
    while pos < len(data):
        try:
            (name_len,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            if rank > 8:
                raise UnsupportedFormat(f"implausible rank {rank} for {name}")
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            end = pos + 4 * count
            if end > len(data):
                raise UnsupportedFormat(f"truncated payload for {name}")
            blobs[name] = np.frombuffer(data[pos:end], dtype="<f4").reshape(dims)
            pos = end
        except (struct.error, UnicodeDecodeError) as exc:
            raise UnsupportedFormat(f"corrupt weight file at byte {pos}: {exc}")
    return blobs


def _expected_shapes(width: int) -> dict:
    shapes = {}
    c_in = 3
    for name, (mult, _) in LAYER_TABLE.items():
        c_out = mult * width
        shapes[f"{name}.weight"] = (c_out, c_in, 3, 3)
        shapes[f"{name}.bias"] = (c_out,)
        c_in = c_out
    return shapes


def load_weights(path) -> PerceptualNet:
    """Build an extractor from a weight file; topology is asserted against
    the published layer table before any weight is accepted."""
    blobs = _read_records(path)
    if "conv1_1.weight" not in blobs:
        raise InvalidWeight("conv1_1.weight", "first-layer weights missing")
    width = int(blobs["conv1_1.weight"].shape[0])
    expected = _expected_shapes(width)
    if set(blobs) != set(expected):
        missing = sorted(set(expected) - set(blobs))
        extra = sorted(set(blobs) - set(expected))
        raise InvalidWeight(
            (missing + extra)[0],
            f"parameter set mismatch (missing {missing[:3]}, extra {extra[:3]})",
        )
    for name, arr in blobs.items():
        if tuple(arr.shape) != expected[name]:
            raise InvalidWeight(name, f"shape {arr.shape}, expected {expected[name]}")
    net = PerceptualNet(width=width)
    with torch.no_grad():
        for name, p in net.named_parameters():
            p.copy_(torch.from_numpy(blobs[name.removeprefix("convs.")].copy()))
    for p in net.parameters():
        p.requires_grad_(False)
    return net


# torchvision vgg19 "features" indices for each conv, for converting a
# downloaded state dict into our flat format.
TORCHVISION_VGG19_INDEX = {
    "conv1_1": 0, "conv1_2": 2,
    "conv2_1": 5, "conv2_2": 7,
    "conv3_1": 10, "conv3_2": 12, "conv3_3": 14, "conv3_4": 16,
    "conv4_1": 19, "conv4_2": 21, "conv4_3": 23, "conv4_4": 25,
    "conv5_1": 28, "conv5_2": 30, "conv5_3": 32, "conv5_4": 34,
}


def convert_torchvision_vgg19(state_dict, out_path) -> None:
    """Write a torchvision vgg19 state dict as a flat weight file."""
    tensors = []
    for name, idx in TORCHVISION_VGG19_INDEX.items():
        for kind in ("weight", "bias"):
            key = f"features.{idx}.{kind}"
            if key not in state_dict:
                raise InvalidWeight(key, "missing from torchvision state dict")
            arr = np.asarray(state_dict[key].detach().cpu().numpy(), dtype="<f4")
            tensors.append((f"{name}.{kind}", arr))
    _write_records(tensors, out_path)


# ---------------------------------------------------------------------------
# cascaded-refinement decoder

DEFAULT_DECODER_TAPS = ("conv5_4", "conv4_4", "conv3_4", "conv2_2", "conv1_2")


class DecoderNet(nn.Module):
    """Coarse-to-fine refinement decoder over a feature stack.

    Each module upsamples the running state 2x, concatenates the tap at
    that resolution, and applies two conv + GroupNorm + LeakyReLU layers.
    All biases start at zero, so an all-zero feature stack decodes to the
    constant sigmoid(0) image.
    """

    def __init__(self, taps=DEFAULT_DECODER_TAPS, width=32, percept_width=64, seed=0):
        super().__init__()
        self.taps = tuple(sorted(taps, key=lambda n: -layer_scale(n)))  # coarse -> fine
        self.width = width
        self.percept_width = percept_width
        torch.manual_seed(derive_seed(seed, "decoder-init"))
        mods = []
        for i, name in enumerate(self.taps):
            c_in = layer_channels(name, percept_width) + (width if i else 0)
            mods.append(nn.Sequential(
                nn.Conv2d(c_in, width, 3, padding=1, padding_mode="replicate"),
                nn.GroupNorm(1, width),
                nn.LeakyReLU(0.2),
                nn.Conv2d(width, width, 3, padding=1, padding_mode="replicate"),
                nn.GroupNorm(1, width),
                nn.LeakyReLU(0.2),
            ))
        self.modules_ = nn.ModuleList(mods)
        self.head = nn.Conv2d(width, 3, 3, padding=1, padding_mode="replicate")
        for mod in self.modules():
            if isinstance(mod, nn.Conv2d):
                nn.init.zeros_(mod.bias)

    def forward(self, features: dict) -> torch.Tensor:
        coarsest = self.taps[0]
        if coarsest not in features:
            raise MissingLayer(coarsest)
        h = None
        for i, name in enumerate(self.taps):
            if name in features:
                tap = features[name]
            else:
                # absent finer taps contribute zeros, keeping shapes fixed
                ref = features[coarsest]
                s = layer_scale(coarsest) // layer_scale(name)
                tap = torch.zeros(
                    ref.shape[0], layer_channels(name, self.percept_width),
                    ref.shape[2] * s, ref.shape[3] * s, dtype=ref.dtype,
                )
            if h is None:
                h = tap
            else:
                h = tf.interpolate(h, size=tap.shape[-2:], mode="nearest")
                h = torch.cat([h, tap], dim=1)
            h = self.modules_[i](h)
        return torch.sigmoid(self.head(h))


def decode_features(net: DecoderNet, features: dict) -> np.ndarray:
    """Decode a numpy feature stack {layer: (C,h,w)} to an (H,W,3) image."""
    tensors = {
        name: torch.from_numpy(np.asarray(feat, dtype=np.float32))[None]
        for name, feat in features.items()
    }
    with torch.no_grad():
        img = net(tensors)[0]
    return img.permute(1, 2, 0).numpy().astype(np.float32)


def train_decoder(decoder, percept, images, iters=200, lr=1e-3, seed=0, batch_size=8):
    """L1 reconstruction training: decode(extract(x)) ~ x.  Returns the
    per-iteration loss history."""
    stacks = []
    targets = []
    for img in images:
        img = validate_image(img)
        t = torch.from_numpy(img).permute(2, 0, 1)[None]
        with torch.no_grad():
            stacks.append(percept.feature_maps(t, decoder.taps))
        targets.append(t)
    opt = torch.optim.Adam(decoder.parameters(), lr=lr)
    rng = make_rng(seed, "decoder-batches")
    history = []
    for _ in range(iters):
        idx = rng.integers(len(images), size=min(batch_size, len(images)))
        batch = {
            name: torch.cat([stacks[i][name] for i in idx]) for name in decoder.taps
            if name in stacks[0]
        }
        target = torch.cat([targets[i] for i in idx])
        opt.zero_grad()
        loss = (decoder(batch) - target).abs().mean()
        loss.backward()
        opt.step()
        history.append(loss.item())
    decoder.eval()
    return history
