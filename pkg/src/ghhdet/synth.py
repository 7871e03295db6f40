"""Synthetic illumination stacks for end-to-end checks.

A single scene of blobs and corners is rendered several times under
different global (gain, colour cast, gamma) and local (smooth shading field,
soft shadow) illumination, plus sensor noise. The viewpoint never changes, so
ground truth between any two images is the identity.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imagekit import write_image


@dataclass
class SynthConfig:
    width: int = 256
    height: int = 256
    n_blobs: int = 24
    n_corners: int = 16
    n_images: int = 20
    min_spacing: float = 24.0
    border: int = 20
    gain_range: tuple = (0.6, 1.3)
    color_jitter: float = 0.15
    gamma_range: tuple = (0.8, 1.25)
    shading_strength: float = 0.35
    shadow_strength: float = 0.3
    noise_sigma: float = 2.0
    seed: int = 0


@dataclass
class SynthScene:
    reflectance: np.ndarray  # (H, W, 3) in [0, 1]
    points: np.ndarray  # (n, 2) x, y of feature centres
    kinds: list


def _place_points(rng, cfg, n):
    pts = []
    tries = 0
    while len(pts) < n:
        tries += 1
        if tries > 100000:
            raise ValueError(f"could not place {n} features {cfg.min_spacing:g}px apart in a {cfg.width}x{cfg.height} image")
        p = rng.uniform([cfg.border, cfg.border], [cfg.width - cfg.border, cfg.height - cfg.border])
        if all(np.hypot(*(p - q)) >= cfg.min_spacing for q in pts):
            pts.append(p)
    return np.array(pts)


def make_scene(cfg: SynthConfig = None) -> SynthScene:
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.height, cfg.width
    # gently textured, coloured background
    base = rng.uniform(0.35, 0.55, size=3)
    tex = ndimage.gaussian_filter(rng.normal(size=(h, w)), 6.0)
    tex *= 0.04 / max(tex.std(), 1e-12)
    refl = base[None, None, :] + tex[..., None]
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    n = cfg.n_blobs + cfg.n_corners
    pts = _place_points(rng, cfg, n)
    kinds = []
    for k, (px, py) in enumerate(pts):
        color = rng.uniform(0.0, 1.0, size=3)
        if k < cfg.n_blobs:
            sigma = rng.uniform(2.5, 4.5)
            mask = np.exp(-((xx - px) ** 2 + (yy - py) ** 2) / (2 * sigma**2))
            kinds.append("blob")
        else:
            # a rotated square whose corner sits at the feature point
            size = rng.uniform(8, 14)
            th = rng.uniform(0, 2 * np.pi)
            u = (xx - px) * np.cos(th) + (yy - py) * np.sin(th)
            v = -(xx - px) * np.sin(th) + (yy - py) * np.cos(th)
            mask = ((u >= 0) & (u <= size) & (v >= 0) & (v <= size)).astype(float)
            mask = ndimage.gaussian_filter(mask, 0.7)
            kinds.append("corner")
        refl = refl * (1 - mask[..., None]) + color[None, None, :] * mask[..., None]
    return SynthScene(np.clip(refl, 0.0, 1.0), pts, kinds)


def render(scene: SynthScene, cfg: SynthConfig, rng) -> np.ndarray:
    """One illumination condition of ``scene`` as an 8-bit RGB image."""
    h, w = scene.reflectance.shape[:2]
    gain = rng.uniform(*cfg.gain_range)
    cast = 1.0 + rng.uniform(-cfg.color_jitter, cfg.color_jitter, size=3)
    field = ndimage.gaussian_filter(rng.normal(size=(h, w)), 40.0)
    field = 1.0 + cfg.shading_strength * field / max(np.abs(field).max(), 1e-12)
    # soft shadow edge across the image
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    th = rng.uniform(0, 2 * np.pi)
    off = rng.uniform(-0.3, 0.3) * min(h, w)
    s = (xx - w / 2) * np.cos(th) + (yy - h / 2) * np.sin(th) - off
    shadow = 1.0 - cfg.shadow_strength * rng.uniform(0, 1) / (1.0 + np.exp(-s / 15.0))
    light = gain * field * shadow
    img = scene.reflectance * cast[None, None, :] * light[..., None]
    img = np.clip(img, 0.0, 1.0) ** rng.uniform(*cfg.gamma_range)
    img = img * 255.0 + rng.normal(0.0, cfg.noise_sigma, size=img.shape)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def make_stack(cfg: SynthConfig = None):
    """``(images, scene)`` with ``cfg.n_images`` renderings of one scene."""
    cfg = cfg or SynthConfig()
    scene = make_scene(cfg)
    rng = np.random.default_rng(cfg.seed + 1)
    return [render(scene, cfg, rng) for _ in range(cfg.n_images)], scene


def write_stack(out_dir, cfg: SynthConfig = None, n_train: int = None):
    """Write the stack as PPM files; with ``n_train`` the images go to ``train/`` and ``test/``."""
    images, scene = make_stack(cfg)
    out = Path(out_dir)
    paths = []
    for i, img in enumerate(images):
        sub = out if n_train is None else out / ("train" if i < n_train else "test")
        sub.mkdir(parents=True, exist_ok=True)
        p = sub / f"img_{i:03d}.ppm"
        write_image(p, img)
        paths.append(p)
    np.savetxt(out / "scene_points.txt", scene.points, fmt="%.3f")
    return paths, scene
