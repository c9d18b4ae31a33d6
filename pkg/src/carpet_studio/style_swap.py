"""Feed-forward local style transfer by feature patch swapping.

Content and style images are encoded at the swap layer, split into strided
patches, and every content patch is replaced by the style patch with the
highest normalized cross-correlation; the reassembled features go through
the inversion decoder to produce the output image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import features as ft
from .errors import (
    EmptyGridError,
    IndexOutOfRangeError,
    PatchTooLargeError,
    ShapeMismatchError,
)
from .image_io import ensure_transfer_size


@dataclass
class SwapConfig:
    patch_size: int = 5
    stride: int = 3
    swap_layer: str = "conv4_1"

    def validate(self):
        errors = {}
        if self.patch_size < 1:
            errors["patch_size"] = "must be >= 1"
        if not 1 <= self.stride <= self.patch_size:
            errors["stride"] = "must satisfy 1 <= stride <= patch_size"
        return errors


@dataclass
class PatchGrid:
    """Strided feature patches in row-major order."""

    patches: np.ndarray  # (N, C, k, k)
    positions: list  # [(row, col), ...] strided origins
    patch_size: int
    stride: int


def _strided_origins(extent, k, s):
    return list(range(0, extent - k + 1, s))


def _gather(feat, origins_r, origins_c, k):
    """Stack the k x k windows of a (C,H,W) map at the given origin grid."""
    win = np.lib.stride_tricks.sliding_window_view(feat, (k, k), axis=(1, 2))
    sel = win[:, origins_r][:, :, origins_c]  # (C, nR, nC, k, k)
    n = len(origins_r) * len(origins_c)
    return np.ascontiguousarray(sel.transpose(1, 2, 0, 3, 4).reshape(n, feat.shape[0], k, k))


def extract_patches(feat, k, s):
    """All strided k x k windows of a (C,H,W) feature map, row-major."""
    feat = np.asarray(feat)
    c, h, w = feat.shape
    if k > h or k > w:
        raise PatchTooLargeError(f"patch {k} exceeds feature dims {h}x{w}")
    if s < 1:
        raise ValueError("stride must be >= 1")
    rows = _strided_origins(h, k, s)
    cols = _strided_origins(w, k, s)
    patches = _gather(feat, rows, cols, k)
    positions = [(r, c) for r in rows for c in cols]
    return PatchGrid(patches=patches, positions=positions, patch_size=k, stride=s)


def _ncc_scores(content_mat, style_mat):
    """Scores[i, j] = <c_i, s_j> / ||s_j||; zero-norm style patches score -inf."""
    norms = np.linalg.norm(style_mat, axis=1)
    scores = content_mat @ style_mat.T
    nonzero = norms > 0
    scores[:, nonzero] /= norms[nonzero]
    scores[:, ~nonzero] = -np.inf
    return scores


def match_patches(content, style):
    """Index of the best style patch for each content patch.

    Cross-correlation is normalized by the style patch norm only (the
    content norm is constant along each argmax row); ties break to the
    lowest style index, and zero-norm style patches are never selected.
    """
    if len(content.patches) == 0 or len(style.patches) == 0:
        raise EmptyGridError("patch grids must be non-empty")
    if content.patches.shape[1:] != style.patches.shape[1:]:
        raise ShapeMismatchError(
            f"content patches {content.patches.shape[1:]} vs style {style.patches.shape[1:]}"
        )
    c_mat = content.patches.reshape(len(content.patches), -1).astype(np.float64)
    s_mat = style.patches.reshape(len(style.patches), -1).astype(np.float64)
    scores = _ncc_scores(c_mat, s_mat)
    return list(np.argmax(scores, axis=1))


def match_patches_naive(content, style):
    """Brute-force O(N*M) reference for match_patches; identical tie rule."""
    if len(content.patches) == 0 or len(style.patches) == 0:
        raise EmptyGridError("patch grids must be non-empty")
    c_mat = content.patches.reshape(len(content.patches), -1).astype(np.float64)
    s_mat = style.patches.reshape(len(style.patches), -1).astype(np.float64)
    out = []
    for ci in c_mat:
        best_j, best_score = 0, -np.inf
        for j, sj in enumerate(s_mat):
            norm = np.linalg.norm(sj)
            score = -np.inf if norm == 0 else float(np.dot(ci, sj)) / norm
            if score > best_score:
                best_j, best_score = j, score
        out.append(best_j)
    return out


def reassemble(style, indices, dims):
    """Write selected style patches at the content grid positions.

    dims is the (C,H,W) shape of the target feature map; the content grid's
    positions are the strided origins implied by dims and the grid geometry.
    Overlapping cells average by overlap count; cells no window reaches
    stay zero.
    """
    c, h, w = dims
    k, s = style.patch_size, style.stride
    rows = _strided_origins(h, k, s)
    cols = _strided_origins(w, k, s)
    positions = [(r, cc) for r in rows for cc in cols]
    if len(indices) != len(positions):
        raise IndexOutOfRangeError(
            f"{len(indices)} indices for {len(positions)} content positions"
        )
    return _accumulate(style.patches, indices, positions, (c, h, w), k)


def _accumulate(patches, indices, positions, dims, k):
    n_style = len(patches)
    out = np.zeros(dims, dtype=np.float64)
    count = np.zeros(dims[1:], dtype=np.float64)
    for idx, (r, cc) in zip(indices, positions):
        if not 0 <= idx < n_style:
            raise IndexOutOfRangeError(f"style index {idx} out of range [0, {n_style})")
        out[:, r:r + k, cc:cc + k] += patches[idx]
        count[r:r + k, cc:cc + k] += 1.0
    covered = count > 0
    out[:, covered] /= count[covered]
    return out.astype(patches.dtype, copy=False)


def _full_coverage_origins(extent, k, s):
    """Strided origins plus a clamped final origin so every cell is covered."""
    origins = _strided_origins(extent, k, s)
    if origins[-1] != extent - k:
        origins.append(extent - k)
    return origins


def run_style_swap(content, style, cfg=None, models=None, progress=None):
    """Encode at the swap layer, swap best-matching patches, decode.

    The working grid augments the strided origins with edge-clamped ones so
    the whole feature map is covered (a bare strided grid leaves dead
    margins whenever stride does not divide the extent); swapping an image
    with itself therefore reproduces plain encode -> decode.
    """
    cfg = cfg or SwapConfig()
    errs = cfg.validate()
    if errs:
        raise ValueError(f"bad config: {errs}")
    content = ensure_transfer_size(content, "content")
    style = ensure_transfer_size(style, "style")
    if models is None:
        models = ft.load_models()
    k, s = cfg.patch_size, cfg.stride

    feat_c = models.encoder.encode(content, [cfg.swap_layer])[cfg.swap_layer]
    feat_s = models.encoder.encode(style, [cfg.swap_layer])[cfg.swap_layer]
    for name, f in (("content", feat_c), ("style", feat_s)):
        if k > f.shape[1] or k > f.shape[2]:
            raise PatchTooLargeError(
                f"patch {k} exceeds {name} feature dims {f.shape[1]}x{f.shape[2]}"
            )

    rows_c = _full_coverage_origins(feat_c.shape[1], k, s)
    cols_c = _full_coverage_origins(feat_c.shape[2], k, s)
    rows_s = _full_coverage_origins(feat_s.shape[1], k, s)
    cols_s = _full_coverage_origins(feat_s.shape[2], k, s)
    patches_c = _gather(feat_c, rows_c, cols_c, k)
    patches_s = _gather(feat_s, rows_s, cols_s, k)

    scores = _ncc_scores(
        patches_c.reshape(len(patches_c), -1).astype(np.float64),
        patches_s.reshape(len(patches_s), -1).astype(np.float64),
    )
    indices = np.argmax(scores, axis=1)

    positions = [(r, c) for r in rows_c for c in cols_c]
    swapped = _accumulate(patches_s, list(indices), positions, feat_c.shape, k)
    if progress is not None:
        progress(0, float(len(set(indices.tolist()))), None)
    return models.decoder.decode(swapped.astype(np.float32), cfg.swap_layer)
