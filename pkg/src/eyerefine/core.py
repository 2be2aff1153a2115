"""Shared domain types, configuration, deterministic RNG, and file I/O.

Conventions used across the package:

* Images are ``float32`` numpy arrays of shape (H, W, 3) with values in
  [0, 1], RGB channel order.
* Class masks are ``uint8`` arrays of shape (H, W) with labels
  0 = background, 1 = iris, 2 = pupil.
* Gaze directions are unit 3-vectors ``(cos(pitch)*sin(yaw), sin(pitch),
  cos(pitch)*cos(yaw))`` with yaw/pitch in radians (degrees only at file and
  CLI boundaries).  x points right, y up, z out of the screen toward the
  camera target.
"""

from __future__ import annotations

import csv
import math
import os
import zlib
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import cv2
import numpy as np

PERCEPT_LAYERS = (
    "conv1_1", "conv1_2",
    "conv2_1", "conv2_2",
    "conv3_1", "conv3_2", "conv3_3", "conv3_4",
    "conv4_1", "conv4_2", "conv4_3", "conv4_4",
    "conv5_1", "conv5_2", "conv5_3", "conv5_4",
)

MANIFEST_FIELDS = ("image_path", "mask_path", "yaw_deg", "pitch_deg", "domain")
MANIFEST_OPTIONAL_FIELDS = ("head_yaw_deg", "head_pitch_deg")
DOMAINS = ("synthetic", "refined", "real")


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

class EyeRefineError(Exception):
    """Base class for package errors; ``code`` feeds the CLI error lines."""

    code = "error"


class MissingFile(EyeRefineError):
    code = "missing-file"


class ParseError(EyeRefineError):
    code = "parse-error"

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InvalidWeight(EyeRefineError):
    code = "invalid-weight"

    def __init__(self, name, message=None):
        self.name = name
        super().__init__(message or f"weight {name!r} must be >= 0")


class UnsupportedFormat(EyeRefineError):
    code = "unsupported-format"


class ShapeError(EyeRefineError):
    code = "shape-error"


class UnknownLayer(EyeRefineError):
    code = "unknown-layer"


class MissingLayer(EyeRefineError):
    code = "missing-layer"


class MaskMismatch(EyeRefineError):
    code = "mask-mismatch"


class ImageTooSmall(EyeRefineError):
    code = "image-too-small"


class InvalidParams(EyeRefineError):
    code = "invalid-params"

    def __init__(self, fieldname, message=None):
        self.fieldname = fieldname
        super().__init__(message or f"parameter {fieldname!r} out of range")


class EmptyDataset(EyeRefineError):
    code = "empty-dataset"


class EmptyBatch(EyeRefineError):
    code = "empty-batch"


class DivergenceDetected(EyeRefineError):
    code = "divergence"


class NotTrained(EyeRefineError):
    code = "not-trained"


class NonUnitInput(EyeRefineError):
    code = "non-unit-input"


class PairMismatch(EyeRefineError):
    code = "pair-mismatch"


class MissingImage(EyeRefineError):
    code = "missing-image"

    def __init__(self, path):
        self.path = str(path)
        super().__init__(f"image not found: {path}")


class MissingRun(EyeRefineError):
    code = "missing-run"


# ---------------------------------------------------------------------------
# Deterministic randomness
# ---------------------------------------------------------------------------

def _mix_tag(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFF
    return zlib.crc32(str(tag).encode("utf-8"))


def derive_seed(master_seed: int, *tags) -> int:
    """Stable child seed from a master seed plus arbitrary tags.

    Every random draw in the repository flows from one master seed through
    this function, so a fixed seed + config reproduces runs exactly.
    """
    # tag count is part of the entropy so a trailing 0 tag cannot collide
    # with the untagged stream
    entropy = [int(master_seed) & 0xFFFFFFFF, len(tags)] + [_mix_tag(t) for t in tags]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def make_rng(master_seed: int, *tags) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, *tags))


# ---------------------------------------------------------------------------
# Gaze geometry
# ---------------------------------------------------------------------------

def yaw_pitch_to_vector(yaw: float, pitch: float) -> np.ndarray:
    """Unit gaze vector for yaw/pitch in radians."""
    cp = math.cos(pitch)
    return np.array(
        [cp * math.sin(yaw), math.sin(pitch), cp * math.cos(yaw)], dtype=np.float64
    )


def vector_to_yaw_pitch(v: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if abs(n - 1.0) > 1e-6:
        raise NonUnitInput(f"gaze vector norm {n:.9f} != 1")
    pitch = math.asin(max(-1.0, min(1.0, float(v[1]))))
    yaw = math.atan2(float(v[0]), float(v[2]))
    return yaw, pitch


def angular_degrees(g1: Sequence[float], g2: Sequence[float]) -> float:
    """Angle between two unit vectors, in degrees.  See gazeval.angular_error."""
    g1 = np.asarray(g1, dtype=np.float64)
    g2 = np.asarray(g2, dtype=np.float64)
    for g in (g1, g2):
        if abs(float(np.linalg.norm(g)) - 1.0) > 1e-6:
            raise NonUnitInput("angular_degrees requires unit vectors")
    d = float(np.clip(np.dot(g1, g2), -1.0, 1.0))
    return math.degrees(math.acos(d))


@dataclass
class GazeSample:
    """An eye image with its gaze annotation and source domain."""

    image: np.ndarray
    gaze: np.ndarray
    yaw_pitch: tuple[float, float]
    domain: str
    mask: Optional[np.ndarray] = None
    image_path: Optional[str] = None
    mask_path: Optional[str] = None

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise InvalidParams("domain", f"domain {self.domain!r} not in {DOMAINS}")
        rebuilt = yaw_pitch_to_vector(*self.yaw_pitch)
        if float(np.max(np.abs(rebuilt - np.asarray(self.gaze, dtype=np.float64)))) > 1e-9:
            raise InvalidParams("gaze", "gaze vector inconsistent with yaw/pitch")

    @classmethod
    def from_yaw_pitch(cls, image, yaw, pitch, domain, mask=None, **kw):
        return cls(
            image=image,
            gaze=yaw_pitch_to_vector(yaw, pitch),
            yaw_pitch=(float(yaw), float(pitch)),
            domain=domain,
            mask=mask,
            **kw,
        )


# ---------------------------------------------------------------------------
# Image validation and raster I/O
# ---------------------------------------------------------------------------

def validate_image(image: np.ndarray, name: str = "image") -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"{name}: expected (H, W, 3), got {image.shape}")
    if image.shape[0] < 8 or image.shape[1] < 8:
        raise ShapeError(f"{name}: min side is 8, got {image.shape[:2]}")
    if not np.all(np.isfinite(image)):
        raise ShapeError(f"{name}: non-finite values")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ShapeError(f"{name}: values outside [0, 1]")
    return image.astype(np.float32, copy=False)


def validate_mask(mask: np.ndarray, image: Optional[np.ndarray] = None) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeError(f"mask: expected (H, W), got {mask.shape}")
    if image is not None and mask.shape != image.shape[:2]:
        raise MaskMismatch(f"mask {mask.shape} does not match image {image.shape[:2]}")
    if mask.size and (int(mask.max()) > 2 or int(mask.min()) < 0):
        raise ShapeError("mask labels must be in {0, 1, 2}")
    return mask.astype(np.uint8, copy=False)


def save_image(image: np.ndarray, path, bit_depth: int = 8) -> None:
    """Write an RGB image as lossless PNG at 8- or 16-bit depth."""
    image = validate_image(image)
    if bit_depth not in (8, 16):
        raise UnsupportedFormat(f"bit depth {bit_depth} (want 8 or 16)")
    if not str(path).lower().endswith(".png"):
        raise UnsupportedFormat(f"images are stored as .png, got {path}")
    scale = 255 if bit_depth == 8 else 65535
    dtype = np.uint8 if bit_depth == 8 else np.uint16
    raw = np.round(image.astype(np.float64) * scale).astype(dtype)
    if not cv2.imwrite(str(path), raw[:, :, ::-1]):  # RGB -> BGR
        raise OSError(f"could not write {path}")


def load_image(path) -> np.ndarray:
    """Read an 8- or 16-bit RGB raster back to a float image in [0, 1]."""
    if not os.path.exists(path):
        raise MissingImage(path)
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise UnsupportedFormat(f"could not decode {path}")
    if raw.ndim == 3 and raw.shape[2] == 4:
        raw = raw[:, :, :3]
    if raw.ndim != 3 or raw.shape[2] != 3:
        raise UnsupportedFormat(f"{path}: expected an RGB raster, got shape {raw.shape}")
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise UnsupportedFormat(f"{path}: unsupported sample type {raw.dtype}")
    image = raw[:, :, ::-1].astype(np.float32) / scale
    return validate_image(image)


def save_mask(mask: np.ndarray, path) -> None:
    mask = validate_mask(mask)
    if not cv2.imwrite(str(path), mask):
        raise OSError(f"could not write {path}")


def load_mask(path) -> np.ndarray:
    if not os.path.exists(path):
        raise MissingImage(path)
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise UnsupportedFormat(f"could not decode {path}")
    if raw.ndim == 3:
        raw = raw[:, :, 0]
    return validate_mask(raw)


# ---------------------------------------------------------------------------
# Dataset manifests
# ---------------------------------------------------------------------------

def write_manifest(path, rows: Iterable[dict]) -> None:
    """Write manifest rows (dicts keyed by the manifest fields) as CSV."""
    rows = list(rows)
    extra = [
        f for f in MANIFEST_OPTIONAL_FIELDS if any(f in r for r in rows)
    ]
    fields = list(MANIFEST_FIELDS) + extra
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in fields})


def read_manifest(path) -> list[dict]:
    """Read manifest rows as raw string dicts; validation happens downstream."""
    if not os.path.exists(path):
        raise MissingFile(f"manifest not found: {path}")
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ParseError("empty manifest (no header)", line=1)
        missing = [f for f in MANIFEST_FIELDS if f not in reader.fieldnames]
        if missing:
            raise ParseError(f"missing manifest columns {missing}", line=1)
        return [dict(row) for row in reader]


# ---------------------------------------------------------------------------
# Refiner configuration
# ---------------------------------------------------------------------------

DEFAULT_LOCAL_STYLE_LAYERS = ("conv1_1", "conv2_1", "conv3_1", "conv4_1", "conv5_1")
DEFAULT_GLOBAL_STYLE_LAYERS = ("conv1_2", "conv2_2", "conv3_3", "conv4_3", "conv5_3")


@dataclass(frozen=True)
class RefinerConfig:
    """All loss weights, layer preferences, resolutions, and schedule knobs.

    Defaults reproduce the documented operating point: style weight 1e2,
    regularizer weight 1e4, content weight 1e2, uniform 1/5 weights on the
    five style layers of each route, and unit weight on each content layer.
    """

    style_weight: float = 1e2          # config key "eta"
    reg_weight: float = 1e4            # config key "vartheta"
    content_weight: float = 1e2        # config key "mu"
    global_style_mix: float = 1.0      # config key "lambda_g"
    local_style_mix: float = 1.0       # config key "lambda_l"
    transfer_weight: float = 1.0       # config key "lambda": style-transfer vs GAN
    adv_weight: float = 1.0            # weight on the adversarial generator term
    local_content_layer: str = "conv4_2"
    global_content_layer: str = "conv3_2"
    local_style_layers: tuple[str, ...] = DEFAULT_LOCAL_STYLE_LAYERS
    global_style_layers: tuple[str, ...] = DEFAULT_GLOBAL_STYLE_LAYERS
    content_layer_weight: float = 1.0  # alpha on each configured content layer
    matting_eps: float = 1e-5
    train_resolution: int = 64         # global-generator resolution (297 reproduces
                                       # the published full-scale setting)
    stage1_iters: int = 300
    stage2_iters: int = 200
    stage3_iters: int = 200
    step_size: float = 2e-4
    extractor_width: int = 64          # channels of the first extractor module
    disc_layer: str = "conv2_2"
    seed: int = 0

    def __post_init__(self):
        for name in (
            "style_weight", "reg_weight", "content_weight", "global_style_mix",
            "local_style_mix", "transfer_weight", "adv_weight",
            "content_layer_weight",
        ):
            if getattr(self, name) < 0:
                raise InvalidWeight(_KEY_OF[name])
        for name in ("matting_eps", "step_size"):
            if getattr(self, name) <= 0:
                raise InvalidWeight(_KEY_OF[name], f"{_KEY_OF[name]} must be > 0")
        for name in ("stage1_iters", "stage2_iters", "stage3_iters"):
            if getattr(self, name) < 0:
                raise InvalidWeight(_KEY_OF[name], f"{_KEY_OF[name]} must be >= 0")
        if self.train_resolution < 16:
            raise InvalidParams("train_resolution", "train_resolution must be >= 16")
        if self.extractor_width < 1:
            raise InvalidParams("extractor_width", "extractor_width must be >= 1")
        for layer in (
            (self.local_content_layer, self.global_content_layer)
            + tuple(self.local_style_layers)
            + tuple(self.global_style_layers)
        ):
            if layer not in PERCEPT_LAYERS:
                raise UnknownLayer(f"unknown layer {layer!r}")

    def style_layer_weights(self, which: str) -> dict[str, float]:
        """Per-layer style weights: uniform 1/N over the configured route."""
        layers = self.local_style_layers if which == "local" else self.global_style_layers
        return {l: 1.0 / len(layers) for l in layers}

    def content_layer_weights(self, which: str) -> dict[str, float]:
        layer = self.local_content_layer if which == "local" else self.global_content_layer
        return {layer: self.content_layer_weight}

    def content_layers(self) -> tuple[str, ...]:
        """Both configured content layers, deduplicated, in a fixed order."""
        layers = (self.local_content_layer, self.global_content_layer)
        return tuple(dict.fromkeys(layers))


# Mapping between config-file keys and RefinerConfig fields.  The file format
# is flat `key = value` text with `#` comments; keys absent from the file keep
# their defaults.
_CONFIG_KEYS = {
    "eta": ("style_weight", float),
    "vartheta": ("reg_weight", float),
    "mu": ("content_weight", float),
    "lambda_g": ("global_style_mix", float),
    "lambda_l": ("local_style_mix", float),
    "lambda": ("transfer_weight", float),
    "adv_weight": ("adv_weight", float),
    "local_content_layer": ("local_content_layer", str),
    "global_content_layer": ("global_content_layer", str),
    "local_style_layers": ("local_style_layers", "layers"),
    "global_style_layers": ("global_style_layers", "layers"),
    "content_layer_weight": ("content_layer_weight", float),
    "matting_eps": ("matting_eps", float),
    "train_resolution": ("train_resolution", int),
    "stage1_iters": ("stage1_iters", int),
    "stage2_iters": ("stage2_iters", int),
    "stage3_iters": ("stage3_iters", int),
    "step_size": ("step_size", float),
    "extractor_width": ("extractor_width", int),
    "disc_layer": ("disc_layer", str),
    "seed": ("seed", int),
}
_KEY_OF = {fieldname: key for key, (fieldname, _) in _CONFIG_KEYS.items()}
_KEY_OF.setdefault("matting_eps", "matting_eps")

_NONNEGATIVE_KEYS = {
    "eta", "vartheta", "mu", "lambda_g", "lambda_l", "lambda", "adv_weight",
    "content_layer_weight",
}


def parse_config_text(text: str) -> dict:
    """Parse `key = value` lines into a field dict, rejecting bad input early."""
    fields = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw!r}", line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise ParseError(f"unknown config key {key!r}", line=lineno)
        fieldname, caster = _CONFIG_KEYS[key]
        try:
            if caster == "layers":
                parsed = tuple(v.strip() for v in value.split(",") if v.strip())
            else:
                parsed = caster(value)
        except ValueError:
            raise ParseError(f"bad value {value!r} for key {key!r}", line=lineno)
        if key in _NONNEGATIVE_KEYS and parsed < 0:
            raise InvalidWeight(key)
        fields[fieldname] = parsed
    return fields


def load_config(path) -> RefinerConfig:
    """Load a RefinerConfig from a flat key-value file; absent keys default."""
    if not os.path.exists(path):
        raise MissingFile(f"config not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    return RefinerConfig(**parse_config_text(text))


def config_with(cfg: RefinerConfig, **overrides) -> RefinerConfig:
    """Functional update used by the CLI flag > file > default precedence."""
    return replace(cfg, **overrides)
