"""Synthetic serial-section stacks with known ground-truth deformation.

Each section is one shared specimen rendered through its own smooth warp. The
specimen has persistent dark blobs (mitochondria-like keypoints), cell bodies
whose membranes are re-drawn per section with jittered positions (membranes
rarely run perpendicular to the cut, so they drift between sections), and a
per-section fine texture. Defects are applied after warping: a smooth
multiplicative brightness field, opaque occlusion patches and Gaussian noise.

Warp convention: section ``i`` shows specimen point ``p - u_i(p)`` at pixel ``p``,
so a feature at ``q`` in specimen coordinates appears near ``q + u_i(q)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates
from scipy.spatial import cKDTree


@dataclass(frozen=True)
class SynthSpec:
    """Synthetic stack parameters; lengths in full-resolution pixels."""

    size: int = 1536
    keypoint_density: float = 6e-4  # blobs per square pixel
    keypoint_radius: tuple[float, float] = (4.0, 8.0)
    keypoint_contrast: float = 0.35
    cell_density: float = 2.5e-5  # cell bodies per square pixel
    membrane_width: float = 2.0
    membrane_contrast: float = 0.25
    membrane_jitter: float = 3.0
    texture_sigma: float = 2.0
    texture_amplitude: float = 0.05
    deformation: float = 12.0  # max per-section increment of the smooth warp
    deformation_wavelength: float = 900.0
    translation: tuple[float, float] = (0.0, 0.0)  # per-section rigid step (dx, dy)
    brightness_amplitude: float = 0.4
    brightness_scale: float = 120.0
    occlusions: int = 2
    occlusion_radius: tuple[float, float] = (25.0, 60.0)
    noise_sigma: float = 0.04

    @classmethod
    def clean(cls, **overrides) -> "SynthSpec":
        """No deformation and no defects: every section is the same image."""
        base = dict(
            deformation=0.0, membrane_jitter=0.0, texture_amplitude=0.0,
            brightness_amplitude=0.0, occlusions=0, noise_sigma=0.0,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        for k in ("keypoint_radius", "occlusion_radius", "translation"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class Stack:
    """Rendered sections and their warp fields ``(2, H, W)`` as ``(dx, dy)``."""

    sections: list[np.ndarray]
    warps: list[np.ndarray]
    spec: SynthSpec
    seed: int
    extras: dict = field(default_factory=dict)

    def displacement(self, i: int, j: int, x, y) -> np.ndarray:
        return true_displacement(self.warps[i], self.warps[j], x, y)


def _smooth_field(rng, size: int, wavelength: float, amplitude: float) -> np.ndarray:
    """Band-limited random 2-vector field with max magnitude ``amplitude``."""
    if amplitude == 0:
        return np.zeros((2, size, size))
    coarse = max(2, int(np.ceil(size / wavelength)) + 2)
    grid = rng.normal(size=(2, coarse, coarse))
    yy, xx = np.mgrid[0:size, 0:size] * ((coarse - 1) / (size - 1))
    out = np.stack([map_coordinates(g, [yy, xx], order=3, mode="nearest") for g in grid])
    mag = np.sqrt((out ** 2).sum(axis=0)).max()
    return out * (amplitude / mag) if mag > 0 else out


def _warp(img: np.ndarray, u: np.ndarray) -> np.ndarray:
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return map_coordinates(img, [yy - u[1], xx - u[0]], order=1, mode="reflect")


def _render_specimen(rng, spec: SynthSpec, n_sections: int):
    """Shared keypoint layer plus per-section membrane/texture layers."""
    s = spec.size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    coords = np.column_stack([xx.ravel(), yy.ravel()])

    keypoints = np.zeros((s, s))
    n_kp = rng.poisson(spec.keypoint_density * s * s)
    for _ in range(n_kp):
        cx, cy = rng.uniform(0, s, size=2)
        ra = rng.uniform(*spec.keypoint_radius)
        rb = ra * rng.uniform(0.6, 1.0)
        th = rng.uniform(0, np.pi)
        r = int(np.ceil(ra + 3))
        x0, x1 = max(int(cx) - r, 0), min(int(cx) + r + 1, s)
        y0, y1 = max(int(cy) - r, 0), min(int(cy) + r + 1, s)
        if x0 >= x1 or y0 >= y1:
            continue
        dx = xx[y0:y1, x0:x1] - cx
        dy = yy[y0:y1, x0:x1] - cy
        a = (dx * np.cos(th) + dy * np.sin(th)) / ra
        b = (-dx * np.sin(th) + dy * np.cos(th)) / rb
        d = np.sqrt(a * a + b * b)
        # soft-edged ellipse with a slightly lighter core
        blob = 1.0 / (1.0 + np.exp(np.minimum((d - 1.0) * 8.0, 50.0))) * (1.0 - 0.3 * np.exp(-(d / 0.45) ** 2))
        keypoints[y0:y1, x0:x1] = np.maximum(keypoints[y0:y1, x0:x1], blob)
    keypoints *= -spec.keypoint_contrast

    n_cells = max(2, rng.poisson(spec.cell_density * s * s))
    seeds = rng.uniform(0, s, size=(n_cells, 2))
    cell_gray = rng.normal(0, 0.04, size=n_cells)
    layers = []
    moved = seeds
    for i in range(n_sections):
        if spec.membrane_jitter and i > 0:
            # membranes drift as a random walk through the stack
            moved = moved + rng.normal(0, spec.membrane_jitter, size=seeds.shape)
        dist, idx = cKDTree(moved).query(coords, k=2)
        gap = (dist[:, 1] - dist[:, 0]).reshape(s, s)
        membrane = -spec.membrane_contrast * np.exp(-0.5 * (gap / (2 * spec.membrane_width)) ** 2)
        body = cell_gray[idx[:, 0]].reshape(s, s)
        layer = membrane + body
        if spec.texture_amplitude:
            tex = gaussian_filter(rng.normal(size=(s, s)), spec.texture_sigma)
            layer += tex * (spec.texture_amplitude / tex.std())
        layers.append(layer)
    return keypoints, layers


def _defects(rng, spec: SynthSpec, img: np.ndarray) -> np.ndarray:
    s = spec.size
    out = img
    if spec.brightness_amplitude:
        f = gaussian_filter(rng.normal(size=(s, s)), spec.brightness_scale, mode="wrap")
        f *= spec.brightness_amplitude / np.abs(f).max()
        out = out * (1.0 + f)
    if spec.occlusions:
        yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
        for _ in range(spec.occlusions):
            cx, cy = rng.uniform(0, s, size=2)
            r = rng.uniform(*spec.occlusion_radius)
            level = rng.choice([0.12, 0.9])
            edge = np.clip((np.hypot(xx - cx, yy - cy) - r) / 2.0, -50, 50)
            mask = 1.0 / (1.0 + np.exp(edge))
            out = out * (1 - mask) + level * mask
    if spec.noise_sigma:
        out = out + rng.normal(0, spec.noise_sigma, size=out.shape)
    return out


def generate_stack(spec: SynthSpec, n_sections: int, seed: int) -> Stack:
    if n_sections < 1:
        raise ValueError("need at least one section")
    if spec.size < 8:
        raise ValueError("section size must be >= 8")
    rng = np.random.default_rng(seed)
    keypoints, layers = _render_specimen(rng, spec, n_sections)
    warps = []
    u = np.zeros((2, spec.size, spec.size))
    for i in range(n_sections):
        if i > 0:
            u = u + _smooth_field(rng, spec.size, spec.deformation_wavelength, spec.deformation)
            u[0] += spec.translation[0]
            u[1] += spec.translation[1]
        warps.append(u.astype(np.float32))
    sections = []
    for i in range(n_sections):
        specimen = 0.65 + keypoints + layers[i]
        img = _warp(specimen, warps[i].astype(np.float64)) if np.any(warps[i]) else specimen
        img = _defects(rng, spec, img)
        sections.append(np.clip(img, 0.0, 1.0).astype(np.float32))
    return Stack(sections, warps, spec, seed)


def true_displacement(warp_a: np.ndarray, warp_b: np.ndarray, x, y, iters: int = 20) -> np.ndarray:
    """Displacement ``(dx, dy)`` carrying pixel ``(x, y)`` of section A to section B.

    The specimen point under A's pixel is ``q = p - u_a(p)``; its position in B
    solves ``z - u_b(z) = q`` and is found by fixed-point iteration.
    """
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))

    def sample(u, px, py):
        return np.stack([map_coordinates(u[c].astype(np.float64), [py, px], order=1, mode="nearest") for c in (0, 1)])

    ua = sample(warp_a, x, y)
    qx, qy = x - ua[0], y - ua[1]
    zx, zy = qx.copy(), qy.copy()
    for _ in range(iters):
        ub = sample(warp_b, zx, zy)
        zx, zy = qx + ub[0], qy + ub[1]
    return np.stack([zx - x, zy - y], axis=-1)
