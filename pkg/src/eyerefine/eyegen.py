"""Procedural toy eye renderer and domain-shift simulator.

Provides desk-scale paired data (image, exact mask, exact gaze) for the
"synthetic" domain, and a pseudo-"real" domain made by pushing rendered
images through a fixed appearance shift (blur, per-channel gain, vignette,
noise).  The controlled gap between the two domains is what the refiner is
asked to close.

Geometry: the eye opening is an ellipse on a skin background, with an iris
disk and a pupil disk inside it.  The pupil center is displaced from the
iris center by ``k * (sin(yaw), -sin(pitch))`` (image y grows downward, so
looking up moves the pupil up), with ``k`` scaled so the pupil stays inside
the iris for |yaw|, |pitch| <= 0.5 rad.  Shading is flat with anti-aliased
edges from 2x supersampling; the mask is exact by pixel-center membership.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from . import core
from .core import (
    GazeSample,
    InvalidParams,
    MissingImage,
    ParseError,
    make_rng,
    validate_image,
)

PUPIL_COLOR = (0.05, 0.04, 0.04)
# Maximum pupil displacement per unit of (sin yaw, sin pitch), as a fraction
# of (iris radius - pupil radius): keeps the pupil inside the iris for
# |yaw|, |pitch| <= 0.5 rad even when both are at the limit.
_DISPLACEMENT_NORM = math.sqrt(2.0) * math.sin(0.5)


def _check_color(name, value):
    value = tuple(float(v) for v in value)
    if len(value) != 3 or any(not (0.0 <= v <= 1.0) for v in value):
        raise InvalidParams(name, f"{name} must be an RGB triple in [0,1]")
    return value


@dataclass(frozen=True)
class EyeParams:
    """Geometry and palette of one rendered eye."""

    yaw: float = 0.0
    pitch: float = 0.0
    iris_radius: float = 0.22      # fraction of image width
    pupil_ratio: float = 0.45      # fraction of iris radius
    sclera_color: tuple = (0.92, 0.90, 0.88)
    iris_color: tuple = (0.35, 0.22, 0.12)
    skin_color: tuple = (0.76, 0.60, 0.52)
    eyelid_aperture: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.iris_radius < 0.5):
            raise InvalidParams("iris_radius")
        if not (0.1 < self.pupil_ratio < 0.9):
            raise InvalidParams("pupil_ratio")
        if not (0.0 < self.eyelid_aperture <= 1.0):
            raise InvalidParams("eyelid_aperture")
        if abs(self.yaw) > 0.5 or abs(self.pitch) > 0.5:
            raise InvalidParams("gaze", "|yaw| and |pitch| must be <= 0.5 rad")
        object.__setattr__(self, "sclera_color", _check_color("sclera_color", self.sclera_color))
        object.__setattr__(self, "iris_color", _check_color("iris_color", self.iris_color))
        object.__setattr__(self, "skin_color", _check_color("skin_color", self.skin_color))


@dataclass(frozen=True)
class DomainShiftConfig:
    """Fixed appearance shift defining the pseudo-real domain."""

    blur_sigma: float = 0.0
    color_gain: tuple = (1.0, 1.0, 1.0)
    noise_sigma: float = 0.0
    vignette_strength: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.blur_sigma < 0:
            raise InvalidParams("blur_sigma")
        if self.noise_sigma < 0:
            raise InvalidParams("noise_sigma")
        if not (0.0 <= self.vignette_strength <= 1.0):
            raise InvalidParams("vignette_strength")
        gains = tuple(float(g) for g in self.color_gain)
        if len(gains) != 3 or any(not (0.5 <= g <= 1.5) for g in gains):
            raise InvalidParams("color_gain", "gains must be 3 values in [0.5, 1.5]")
        object.__setattr__(self, "color_gain", gains)

    @property
    def is_identity(self):
        return (
            self.blur_sigma == 0
            and self.noise_sigma == 0
            and self.vignette_strength == 0
            and self.color_gain == (1.0, 1.0, 1.0)
        )


def _region_fields(params: EyeParams, size: int, scale: int):
    """Membership fields for pupil/iris/sclera at `scale`x supersampling."""
    n = size * scale
    # Coordinates of sample centers in final-pixel units.
    ax = (np.arange(n) + 0.5) / scale
    x, y = np.meshgrid(ax, ax)
    c = size / 2.0
    r_i = params.iris_radius * size
    r_p = params.pupil_ratio * r_i
    k = (r_i - r_p) / _DISPLACEMENT_NORM
    px = c + k * math.sin(params.yaw)
    py = c - k * math.sin(params.pitch)
    ex = 0.44 * size
    ey = 0.5 * params.eyelid_aperture * size
    opening = ((x - c) / ex) ** 2 + ((y - c) / ey) ** 2 <= 1.0
    iris = ((x - c) ** 2 + (y - c) ** 2 <= r_i ** 2) & opening
    pupil = ((x - px) ** 2 + (y - py) ** 2 <= r_p ** 2) & opening
    return opening, iris, pupil


def render_eye(params: EyeParams, size: int):
    """Render one eye; returns (image, mask, GazeSample) with exact labels."""
    if size < 32:
        raise InvalidParams("size", "size must be >= 32")
    opening, iris, pupil = _region_fields(params, size, scale=2)
    colors = np.empty((size * 2, size * 2, 3), dtype=np.float64)
    colors[:] = params.skin_color
    colors[opening] = params.sclera_color
    colors[iris] = params.iris_color
    colors[pupil] = PUPIL_COLOR
    # 2x2 block average = anti-aliased downsample to the final size.
    image = colors.reshape(size, 2, size, 2, 3).mean(axis=(1, 3)).astype(np.float32)

    _, iris_px, pupil_px = _region_fields(params, size, scale=1)
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[iris_px] = 1
    mask[pupil_px] = 2

    sample = GazeSample.from_yaw_pitch(image, params.yaw, params.pitch, "synthetic", mask=mask)
    return image, mask, sample


def apply_domain_shift(image: np.ndarray, cfg: DomainShiftConfig) -> np.ndarray:
    """Blur -> per-channel gain -> vignette -> noise -> clamp, in that order."""
    image = validate_image(image)
    if cfg.is_identity:
        return image.copy()
    out = image.astype(np.float64)
    if cfg.blur_sigma > 0:
        out = gaussian_filter(out, sigma=(cfg.blur_sigma, cfg.blur_sigma, 0.0), mode="reflect")
    gains = np.asarray(cfg.color_gain)
    if not np.all(gains == 1.0):
        out = out * gains
    if cfg.vignette_strength > 0:
        h, w = out.shape[:2]
        yy = np.arange(h) - (h - 1) / 2.0
        xx = np.arange(w) - (w - 1) / 2.0
        rho2 = yy[:, None] ** 2 + xx[None, :] ** 2
        falloff = 1.0 - cfg.vignette_strength * (rho2 / rho2.max())
        out = out * falloff[:, :, None]
    if cfg.noise_sigma > 0:
        rng = make_rng(cfg.seed, "shift-noise", out.shape[0], out.shape[1])
        out = out + rng.normal(0.0, cfg.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def sample_params(rng: np.random.Generator, gaze_range: float, seed: int) -> EyeParams:
    """Draw one eye's parameters; gaze uniform over the centered yaw/pitch box."""
    half = min(gaze_range, 1.0) / 2.0
    yaw = float(rng.uniform(-half, half)) if half > 0 else 0.0
    pitch = float(rng.uniform(-half, half)) if half > 0 else 0.0
    iris_palette = [
        (0.35, 0.22, 0.12),  # brown
        (0.28, 0.42, 0.55),  # blue
        (0.30, 0.45, 0.30),  # green
    ]
    base_iris = iris_palette[int(rng.integers(len(iris_palette)))]
    jitter = lambda c, a: tuple(float(np.clip(v + rng.uniform(-a, a), 0.0, 1.0)) for v in c)
    return EyeParams(
        yaw=yaw,
        pitch=pitch,
        iris_radius=float(rng.uniform(0.18, 0.26)),
        pupil_ratio=float(rng.uniform(0.30, 0.55)),
        sclera_color=jitter((0.92, 0.90, 0.88), 0.04),
        iris_color=jitter(base_iris, 0.05),
        skin_color=jitter((0.76, 0.60, 0.52), 0.06),
        eyelid_aperture=float(rng.uniform(0.75, 1.0)),
        seed=seed,
    )


def generate_dataset(
    n: int,
    gaze_range: float,
    shift: DomainShiftConfig | None,
    out_dir,
    seed: int = 0,
    size: int = 64,
) -> str:
    """Render n samples (+ masks + manifest CSV) under out_dir.

    Each sample derives its own RNG from (seed, index), so regeneration with
    the same arguments is exact and generation could be parallelized.
    Returns the manifest path.
    """
    if n < 1:
        raise InvalidParams("n", "n must be >= 1")
    os.makedirs(out_dir, exist_ok=True)
    domain = "real" if shift is not None else "synthetic"
    rows = []
    for i in range(n):
        rng = make_rng(seed, "sample", i)
        params = sample_params(rng, gaze_range, seed=core.derive_seed(seed, "params", i))
        image, mask, _ = render_eye(params, size)
        if shift is not None:
            per_sample = replace(shift, seed=core.derive_seed(shift.seed, "sample", i))
            image = apply_domain_shift(image, per_sample)
        img_name = f"img_{i:04d}.png"
        mask_name = f"mask_{i:04d}.png"
        core.save_image(image, os.path.join(out_dir, img_name))
        core.save_mask(mask, os.path.join(out_dir, mask_name))
        rows.append({
            "image_path": img_name,
            "mask_path": mask_name,
            "yaw_deg": f"{math.degrees(params.yaw):.6f}",
            "pitch_deg": f"{math.degrees(params.pitch):.6f}",
            "domain": domain,
        })
    manifest_path = os.path.join(out_dir, "manifest.csv")
    core.write_manifest(manifest_path, rows)
    return manifest_path


def load_manifest(path) -> list[GazeSample]:
    """Load a manifest's rows into validated GazeSamples (angles -> radians)."""
    rows = core.read_manifest(path)
    base = os.path.dirname(os.path.abspath(path))
    resolve = lambda p: p if os.path.isabs(p) else os.path.join(base, p)
    samples = []
    for idx, row in enumerate(rows, start=1):
        try:
            yaw = math.radians(float(row["yaw_deg"]))
            pitch = math.radians(float(row["pitch_deg"]))
        except (TypeError, ValueError):
            raise ParseError(f"bad yaw/pitch in row {idx}: {row}", line=idx + 1)
        domain = (row.get("domain") or "").strip()
        if domain not in core.DOMAINS:
            raise ParseError(f"bad domain {domain!r} in row {idx}", line=idx + 1)
        image_path = resolve(row["image_path"])
        if not os.path.exists(image_path):
            raise MissingImage(image_path)
        image = core.load_image(image_path)
        mask = None
        mask_path = (row.get("mask_path") or "").strip()
        if mask_path:
            mask = core.load_mask(resolve(mask_path))
        samples.append(
            GazeSample.from_yaw_pitch(
                image, yaw, pitch, domain, mask=mask,
                image_path=image_path,
                mask_path=resolve(mask_path) if mask_path else None,
            )
        )
    return samples
