"""Procedural images: carpet-like maps and texture swatches.

Used as demo inputs, as test fixtures, and as the sample corpus for fitting
the feature-inversion decoder.  Everything is seeded and deterministic; no
binary assets ship with the package.
"""

from __future__ import annotations

import numpy as np


def _coords(size):
    ys, xs = np.meshgrid(np.linspace(-1, 1, size), np.linspace(-1, 1, size), indexing="ij")
    return ys, xs


def make_carpet_map(seed=0, size=128, grayscale=True):
    """A symmetric medallion-and-border pattern resembling a carpet chart."""
    rng = np.random.default_rng(seed)
    ys, xs = _coords(size)
    r = np.sqrt(ys**2 + xs**2)
    theta = np.arctan2(ys, xs)
    field = np.zeros((size, size))
    for _ in range(4):
        k = rng.integers(3, 9)
        phase = rng.uniform(0, 2 * np.pi)
        radial = rng.uniform(4, 12)
        field += np.cos(k * theta + phase) * np.cos(radial * r)
    field += 2.0 * np.cos(rng.uniform(6, 14) * r)
    # fourfold symmetry, like a quarter-repeat carpet map
    field = field + field[::-1] + field[:, ::-1] + field[::-1, ::-1]
    pattern = (field > np.median(field)).astype(np.float64)
    border = max(2, size // 12)
    frame = np.zeros_like(pattern)
    frame[border:-border, border:-border] = 1.0
    inner = max(1, border // 2)
    ring = frame.copy()
    ring[border + inner:-(border + inner), border + inner:-(border + inner)] = 0.0
    img = pattern * frame + ring
    img = np.clip(img, 0, 1)
    out = np.repeat(img[:, :, None], 3, axis=2)
    if not grayscale:
        tint = rng.uniform(0.2, 1.0, size=3)
        out = out * tint + (1 - out) * rng.uniform(0.0, 0.3, size=3)
    return out.astype(np.float32)


def make_texture(seed=0, size=128, colors=None):
    """A colorful texture swatch: low-frequency fields plus hard-edged shapes."""
    rng = np.random.default_rng(seed)
    ys, xs = _coords(size)
    img = np.zeros((size, size, 3))
    for c in range(3):
        field = np.zeros((size, size))
        for _ in range(3):
            fy, fx = rng.uniform(0.5, 5.0, size=2)
            phase = rng.uniform(0, 2 * np.pi, size=2)
            field += rng.uniform(0.3, 1.0) * np.sin(fy * np.pi * ys + phase[0]) * np.sin(
                fx * np.pi * xs + phase[1]
            )
        img[:, :, c] = field
    img = (img - img.min()) / (np.ptp(img) + 1e-9)
    if colors is None:
        colors = rng.uniform(0, 1, size=(rng.integers(3, 6), 3))
    for color in colors:
        cy, cx = rng.uniform(-0.8, 0.8, size=2)
        ry, rx = rng.uniform(0.1, 0.5, size=2)
        mask = ((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2 < 1.0
        img[mask] = color
    return np.clip(img, 0, 1).astype(np.float32)


def make_two_tone(color_a, color_b, size=64, axis=0):
    """Two solid halves; handy for palette and mask tests."""
    img = np.empty((size, size, 3), dtype=np.float32)
    half = size // 2
    if axis == 0:
        img[:half] = color_a
        img[half:] = color_b
    else:
        img[:, :half] = color_a
        img[:, half:] = color_b
    return img


def decoder_fit_corpus(seed, n, size):
    """Deterministic mixed corpus the inversion decoder is fitted against."""
    rng = np.random.default_rng(seed)
    imgs = []
    for i in range(n):
        kind = i % 3
        if kind == 0:
            imgs.append(make_carpet_map(seed=int(rng.integers(1 << 30)), size=size))
        elif kind == 1:
            imgs.append(make_texture(seed=int(rng.integers(1 << 30)), size=size))
        else:
            # band-limited noise keeps the fit honest on unstructured input
            noise = rng.standard_normal((size, size, 3))
            k = size // 8
            kernel = np.ones(k) / k
            for ax in (0, 1):
                noise = np.apply_along_axis(
                    lambda m: np.convolve(m, kernel, mode="same"), ax, noise
                )
            noise = (noise - noise.min()) / (np.ptp(noise) + 1e-9)
            imgs.append(noise.astype(np.float32))
    return imgs
