"""Style, content, and photorealism loss algebra with analytic gradients.

Feature blocks are (N, M) matrices: N channels by M spatial positions (a
(C,h,w) block is accepted and flattened).  Per layer l and semantic class
c, masked features scale every channel by the class's spatial mask, and
the local style loss compares masked Gram matrices

    l_ls = sum_c 1/(4 N^2 M_c^2) ||G_c[O] - G_c[S]||^2,

with M_c the output-side mask area clamped below by 1; the global variant
is the same without masks and with M_c -> M.  With one class and all-ones
masks the two coincide, which the tests pin down to 1e-12.

The photorealism term is the quadratic form of the output's channels in
the input image's matting Laplacian: it vanishes exactly when each output
channel is locally an affine function of the input's channels, so it
penalizes distortion without penalizing color energy itself.

All losses run on torch tensors internally (so the combined objective is
differentiable end to end); numpy inputs are accepted everywhere and the
scalar losses come back as 0-dim torch tensors for uniformity.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import torch
from numpy.lib.stride_tricks import as_strided

from . import segmenter
from .core import (
    ImageTooSmall,
    MaskMismatch,
    MissingLayer,
    RefinerConfig,
    ShapeError,
    validate_image,
)
from .percept import PerceptualNet


def _as_matrix(block) -> torch.Tensor:
    t = torch.as_tensor(block)
    if t.ndim == 3:
        t = t.reshape(t.shape[0], -1)
    if t.ndim != 2:
        raise ShapeError(f"feature block must be (N,M) or (C,h,w), got {tuple(block.shape)}")
    return t


def gram(block):
    """G = F F^T for a feature block; numpy in, numpy out."""
    t = _as_matrix(block)
    g = t @ t.T
    return g.numpy() if isinstance(block, np.ndarray) else g


def masked_features(block, mask):
    """Scale every channel by the spatial mask (the diagonal reading of
    the feature-times-mask product)."""
    t = _as_matrix(block)
    m = torch.as_tensor(mask).reshape(-1)
    if m.shape[0] != t.shape[1]:
        raise ShapeError(f"mask has {m.shape[0]} positions, features have {t.shape[1]}")
    out = t * m.to(t.dtype)
    return out.numpy() if isinstance(block, np.ndarray) else out


def _layer_masks(masks, name, positions):
    m = torch.as_tensor(np.asarray(masks[name]))
    if m.ndim == 3:
        m = m.reshape(-1, m.shape[-1])
    if m.ndim != 2 or m.shape[0] != positions:
        raise MaskMismatch(f"mask for {name}: {tuple(m.shape)} vs {positions} positions")
    return m


def global_style_loss(o_feats: dict, s_feats: dict, layers) -> dict:
    """Per-layer unmasked Gram loss 1/(4 N^2 M^2) ||G[O] - G[S]||^2."""
    out = {}
    for name in layers:
        if name not in o_feats or name not in s_feats:
            raise MissingLayer(name)
        fo = _as_matrix(o_feats[name])
        fs = _as_matrix(s_feats[name]).to(fo.dtype)
        if fo.shape != fs.shape:
            raise ShapeError(f"{name}: output {tuple(fo.shape)} vs style {tuple(fs.shape)}")
        n, m = fo.shape
        diff = fo @ fo.T - fs @ fs.T
        out[name] = (diff * diff).sum() / (4.0 * n * n * m * m)
    return out


def local_style_loss(o_feats, s_feats, o_masks, s_masks, layers) -> dict:
    """Per-layer class-masked Gram loss.

    Output features are masked by the input image's per-class masks,
    style features by the style image's own; a class empty on either side
    contributes nothing.  Normalization uses the output-side mask area.
    """
    out = {}
    for name in layers:
        if name not in o_feats or name not in s_feats:
            raise MissingLayer(name)
        if name not in o_masks or name not in s_masks:
            raise MaskMismatch(f"no masks for layer {name}")
        fo = _as_matrix(o_feats[name])
        fs = _as_matrix(s_feats[name]).to(fo.dtype)
        if fo.shape != fs.shape:
            raise ShapeError(f"{name}: output {tuple(fo.shape)} vs style {tuple(fs.shape)}")
        mo = _layer_masks(o_masks, name, fo.shape[1]).to(fo.dtype)
        ms = _layer_masks(s_masks, name, fs.shape[1]).to(fo.dtype)
        if mo.shape[1] != ms.shape[1]:
            raise MaskMismatch(f"{name}: {mo.shape[1]} vs {ms.shape[1]} classes")
        n, m = fo.shape
        total = fo.new_zeros(())
        for c in range(mo.shape[1]):
            area_o = mo[:, c].sum()
            area_s = ms[:, c].sum()
            if area_o == 0 or area_s == 0:
                continue
            fo_c = fo * mo[:, c]
            fs_c = fs * ms[:, c]
            diff = fo_c @ fo_c.T - fs_c @ fs_c.T
            m_c = torch.clamp(area_o, min=1.0)
            total = total + (diff * diff).sum() / (4.0 * n * n * m_c * m_c)
        out[name] = total
    return out


def style_loss(l_gs: dict, l_ls: dict, lambda_g: float, lambda_l: float) -> dict:
    """Per-layer combination lambda_g * global + lambda_l * local."""
    out = {}
    for name in l_gs:
        if name not in l_ls:
            raise MissingLayer(name)
        out[name] = lambda_g * torch.as_tensor(l_gs[name]) + lambda_l * torch.as_tensor(l_ls[name])
    return out


def content_loss(o_feats: dict, i_feats: dict, alpha, layers):
    """sum_l alpha_l / (2 N M) ||F[O] - F[I]||^2."""
    total = None
    for name in layers:
        if name not in o_feats or name not in i_feats:
            raise MissingLayer(name)
        fo = _as_matrix(o_feats[name])
        fi = _as_matrix(i_feats[name]).to(fo.dtype)
        if fo.shape != fi.shape:
            raise ShapeError(f"{name}: output {tuple(fo.shape)} vs input {tuple(fi.shape)}")
        a = alpha.get(name, 0.0) if isinstance(alpha, dict) else float(alpha)
        n, m = fo.shape
        term = a * ((fo - fi) ** 2).sum() / (2.0 * n * m)
        total = term if total is None else total + term
    if total is None:
        total = torch.zeros(())
    return total


# ---------------------------------------------------------------------------
# matting Laplacian

@dataclass
class MattingLaplacian:
    """Sparse PSD quadratic form over an image's pixels (row-major order)."""

    matrix: sp.csr_matrix
    image_shape: tuple
    eps: float
    window_radius: int = 1
    _torch_cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_pixels(self) -> int:
        return self.matrix.shape[0]

    def torch_sparse(self, dtype=torch.float64) -> torch.Tensor:
        key = str(dtype)
        if key not in self._torch_cache:
            coo = self.matrix.tocoo()
            idx = torch.from_numpy(np.vstack([coo.row, coo.col]).astype(np.int64))
            val = torch.from_numpy(coo.data).to(dtype)
            self._torch_cache[key] = torch.sparse_coo_tensor(
                idx, val, size=coo.shape, check_invariants=False
            ).coalesce()
        return self._torch_cache[key]


def matting_laplacian(image: np.ndarray, eps: float = 1e-5, window_radius: int = 1) -> MattingLaplacian:
    """Closed-form matting Laplacian over (2r+1)^2 windows.

    Entry (i,j) accumulates, over every window k containing both pixels,
    delta_ij - (1 + (I_i - mu_k)^T (Sigma_k + eps/|w| Id)^[-1] (I_j - mu_k)) / |w|.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[-1] != 3 or not np.isfinite(image).all():
        raise ShapeError(f"expected a finite (H,W,3) image, got {image.shape}")
    image = image.astype(np.float64)
    h, w, _ = image.shape
    win = 2 * window_radius + 1
    if h < win or w < win:
        raise ImageTooSmall(f"need at least {win}x{win}, got {h}x{w}")
    area = win * win
    n = h * w

    indices = np.arange(n).reshape(h, w)
    sy, sx = indices.strides
    kh, kw = h - win + 1, w - win + 1
    win_idx = as_strided(indices, (kh, kw, win, win), (sy, sx, sy, sx)).reshape(-1, area)
    ic, jc, cc = image.strides
    win_pix = as_strided(image, (kh, kw, win, win, 3), (ic, jc, ic, jc, cc)).reshape(-1, area, 3)

    mu = win_pix.mean(axis=1)
    cov = np.einsum("kia,kib->kab", win_pix, win_pix) / area - np.einsum("ka,kb->kab", mu, mu)
    inv = np.linalg.inv(cov + (eps / area) * np.eye(3))
    centered = win_pix - mu[:, None, :]
    affinity = (1.0 + np.einsum("kia,kab,kjb->kij", centered, inv, centered)) / area

    rows = np.repeat(win_idx, area, axis=1).ravel()
    cols = np.tile(win_idx, (1, area)).ravel()
    values = -affinity.ravel()
    # the identity part: each window adds 1 to each member's diagonal
    diag = win_idx.ravel()
    rows = np.concatenate([rows, diag])
    cols = np.concatenate([cols, diag])
    values = np.concatenate([values, np.ones(diag.size)])
    matrix = sp.coo_matrix((values, (rows, cols)), shape=(n, n)).tocsr()
    # einsum evaluates x_i' A x_j and x_j' A x_i in different association
    # orders; averaging with the transpose makes symmetry bit-exact
    matrix = (matrix + matrix.T) * 0.5
    return MattingLaplacian(matrix=matrix.tocsr(), image_shape=(h, w), eps=eps,
                            window_radius=window_radius)


def photorealism_reg(output, matting: MattingLaplacian):
    """sum_c v_c^T M v_c with v_c the output's c-th channel, flattened."""
    if isinstance(output, torch.Tensor):
        if output.shape[-3] == 3 and output.ndim == 3:  # (3,h,w)
            channels = output.reshape(3, -1)
        elif output.ndim == 3 and output.shape[-1] == 3:  # (h,w,3)
            channels = output.permute(2, 0, 1).reshape(3, -1)
        else:
            raise ShapeError(f"expected an RGB image, got {tuple(output.shape)}")
        if channels.shape[1] != matting.n_pixels:
            raise ShapeError(
                f"output has {channels.shape[1]} pixels, matting expects {matting.n_pixels}"
            )
        m = matting.torch_sparse(channels.dtype)
        mv = torch.sparse.mm(m, channels.T)
        return (channels.T * mv).sum()
    arr = np.asarray(output, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ShapeError(f"expected (H,W,3), got {arr.shape}")
    if arr.shape[0] * arr.shape[1] != matting.n_pixels:
        raise ShapeError(
            f"output has {arr.shape[0] * arr.shape[1]} pixels, matting expects {matting.n_pixels}"
        )
    total = 0.0
    for c in range(3):
        v = arr[:, :, c].ravel()
        total += float(v @ matting.matrix.dot(v))
    return torch.tensor(total, dtype=torch.float64)


# ---------------------------------------------------------------------------
# combined objective

@dataclass
class StyleLossTerms:
    """Per-layer and aggregate values of the combined objective."""

    per_layer_global: dict
    per_layer_local: dict
    per_layer_style: dict
    style_weighted: float   # sum_l beta_l * (lambda_g l_gs + lambda_l l_ls)
    content: float
    matting: float
    total: float

    @property
    def global_sum(self):
        return sum(self.per_layer_global.values())

    @property
    def local_sum(self):
        return sum(self.per_layer_local.values())


def _ones_masks(feats):
    return {
        name: np.ones(tuple(f.shape[-2:]) + (1,), dtype=np.float32)
        for name, f in feats.items()
    }


def style_objective(o_tensor: torch.Tensor, input_image, style_image,
                    net: PerceptualNet, cfg: RefinerConfig,
                    input_mask=None, style_mask=None, matting=None):
    """Differentiable L_total for a (3,H,W) output tensor.

    input_image supplies the content reference, the per-class masks for
    the output's Gram terms, and the matting Laplacian; style_image (same
    size) supplies style statistics.  With no masks, the local route sees
    one full-coverage class.  Returns (scalar tensor, StyleLossTerms).
    """
    if o_tensor.ndim != 3 or o_tensor.shape[0] != 3:
        raise ShapeError(f"output tensor must be (3,H,W), got {tuple(o_tensor.shape)}")
    dtype = o_tensor.dtype
    input_image = validate_image(input_image)
    style_image = validate_image(style_image)
    if input_image.shape != style_image.shape or input_image.shape[:2] != tuple(o_tensor.shape[1:]):
        raise ShapeError(
            f"resolution mismatch: output {tuple(o_tensor.shape[1:])}, "
            f"input {input_image.shape[:2]}, style {style_image.shape[:2]}"
        )

    local_layers = tuple(cfg.local_style_layers)
    global_layers = tuple(cfg.global_style_layers)
    content_layers = tuple(cfg.content_layers())
    needed = sorted(set(local_layers) | set(global_layers) | set(content_layers))

    o_feats = net.feature_maps(o_tensor[None], needed)
    o_feats = {k: v[0] for k, v in o_feats.items()}
    with torch.no_grad():
        i_t = torch.from_numpy(input_image).permute(2, 0, 1)[None].to(dtype)
        s_t = torch.from_numpy(style_image).permute(2, 0, 1)[None].to(dtype)
        i_feats = {k: v[0] for k, v in net.feature_maps(i_t, needed).items()}
        s_feats = {k: v[0] for k, v in net.feature_maps(s_t, needed).items()}

    local_sizes = {name: tuple(o_feats[name].shape[-2:]) for name in local_layers}
    if input_mask is not None:
        o_masks = segmenter.downsample_masks(input_mask, local_sizes)
    else:
        o_masks = _ones_masks({n: o_feats[n] for n in local_layers})
    if style_mask is not None:
        s_masks = segmenter.downsample_masks(style_mask, local_sizes)
    else:
        s_masks = _ones_masks({n: s_feats[n] for n in local_layers})

    l_gs = global_style_loss(o_feats, s_feats, global_layers)
    l_ls = local_style_loss(o_feats, s_feats, o_masks, s_masks, local_layers)

    beta_g = cfg.style_layer_weights("global")
    beta_l = cfg.style_layer_weights("local")
    style_weighted = o_tensor.new_zeros(())
    for name in global_layers:
        style_weighted = style_weighted + beta_g[name] * cfg.global_style_mix * l_gs[name]
    for name in local_layers:
        style_weighted = style_weighted + beta_l[name] * cfg.local_style_mix * l_ls[name]

    alpha = {**cfg.content_layer_weights("local"), **cfg.content_layer_weights("global")}
    content = content_loss(o_feats, i_feats, alpha, content_layers)

    if matting is None:
        matting = matting_laplacian(input_image, eps=cfg.matting_eps)
    l_m = photorealism_reg(o_tensor, matting)

    total = (cfg.style_weight * style_weighted
             + cfg.content_weight * content
             + cfg.reg_weight * l_m)

    val = lambda t: float(t.detach()) if torch.is_tensor(t) else float(t)
    per_style = {}
    for name in set(global_layers) | set(local_layers):
        term = 0.0
        if name in l_gs:
            term += cfg.global_style_mix * val(l_gs[name])
        if name in l_ls:
            term += cfg.local_style_mix * val(l_ls[name])
        per_style[name] = term
    terms = StyleLossTerms(
        per_layer_global={k: val(v) for k, v in l_gs.items()},
        per_layer_local={k: val(v) for k, v in l_ls.items()},
        per_layer_style=per_style,
        style_weighted=val(style_weighted),
        content=val(content),
        matting=val(l_m),
        total=val(total),
    )
    return total, terms


def total_loss(output, input_image, style_image, net, cfg,
               input_mask=None, style_mask=None, matting=None):
    """L_total and its analytic gradient w.r.t. every output pixel.

    Returns (value, gradient (H,W,3) in the output's dtype, terms).
    """
    output = np.asarray(output)
    dtype = torch.float64 if output.dtype == np.float64 else torch.float32
    o = torch.from_numpy(np.ascontiguousarray(output, dtype=output.dtype))
    o = o.permute(2, 0, 1).to(dtype).requires_grad_(True)
    net_dtype = next(net.parameters()).dtype
    if net_dtype != dtype:
        raise ShapeError(f"net dtype {net_dtype} does not match output dtype {dtype}")
    loss, terms = style_objective(o, input_image, style_image, net, cfg,
                                  input_mask=input_mask, style_mask=style_mask,
                                  matting=matting)
    loss.backward()
    grad = o.grad.permute(1, 2, 0).numpy().astype(output.dtype)
    return float(loss.detach()), grad, terms


# ---------------------------------------------------------------------------
# diagnostic dump

LOSS_CSV_FIELDS = ("iter", "l_gs", "l_ls", "l_style_weighted", "content", "l_m", "L_total")
GAN_CSV_FIELDS = LOSS_CSV_FIELDS + ("loss_D", "loss_G_adv")


class LossWriter:
    """Appends per-iteration loss rows to a CSV with a fixed header."""

    def __init__(self, path, adversarial=False):
        self.path = path
        self.fields = GAN_CSV_FIELDS if adversarial else LOSS_CSV_FIELDS
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerow(self.fields)

    def write(self, iteration, terms: StyleLossTerms, loss_d=None, loss_g_adv=None):
        row = [iteration, float(terms.global_sum), float(terms.local_sum),
               terms.style_weighted, terms.content, terms.matting, terms.total]
        if len(self.fields) > 7:
            row += [float(loss_d) if loss_d is not None else "",
                    float(loss_g_adv) if loss_g_adv is not None else ""]
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow(row)
