"""Synthetic desk-scale dataset: road ribbons over textured terrain with
shadow artifacts, plus matching sparse LiDAR sweeps.

Each sample renders an aerial view of one or two road ribbons. Shadows
darken the image multiplicatively (LiDAR intensity is unaffected, which is
the fusion signal); a configurable fraction of the point cloud is dropped in
coherent blobs to mimic non-rescanning solid-state sweeps. The cloud is
split across frames with known poses so the accumulation path is exercised
on every load.

One directory per sample: image.ppm, labels.pgm, cloud_XX.txt, poses.txt,
calib.txt, meta.json. Everything is byte-deterministic for a given seed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geom, imgio
from .network import Sample

CAMERA_HEIGHT_M = 30.0
HEIGHT_NORM_M = 5.0


@dataclass
class SynthConfig:
    n: int = 16
    resolution: int = 64
    seed: int = 0
    void_fraction: float = 0.5
    shadow_count: tuple = (1, 3)
    cloud_frames: int = 2
    extra_roads_prob: float = 0.35
    max_range: float = 120.0


def smooth_noise(rng, res: int, cells: int) -> np.ndarray:
    """Bilinearly upsampled coarse noise in [0, 1]."""
    coarse = rng.random((cells + 1, cells + 1))
    t = np.linspace(0, cells, res)
    i0 = np.clip(t.astype(int), 0, cells - 1)
    frac = t - i0
    top = coarse[i0][:, i0]
    a = top + (coarse[i0 + 1][:, i0] - top) * frac[:, None]
    top2 = coarse[i0][:, i0 + 1]
    b = top2 + (coarse[i0 + 1][:, i0 + 1] - top2) * frac[:, None]
    return a + (b - a) * frac[None, :]


def _road_mask(rng, res: int, extra_prob: float = 0.35) -> np.ndarray:
    """Union of one or two ribbon roads crossing the frame."""

    def ribbon():
        side = rng.integers(0, 2)
        width = res * rng.uniform(0.10, 0.16)
        if side == 0:  # left -> right
            xs = np.array([0.0, res * 0.33, res * 0.66, float(res - 1)])
            ys = rng.uniform(res * 0.15, res * 0.85, size=4)
        else:  # top -> bottom
            ys = np.array([0.0, res * 0.33, res * 0.66, float(res - 1)])
            xs = rng.uniform(res * 0.15, res * 0.85, size=4)
        py, px = np.mgrid[0:res, 0:res]
        dist = np.full((res, res), np.inf)
        for (x0, y0), (x1, y1) in zip(zip(xs, ys), zip(xs[1:], ys[1:])):
            dx, dy = x1 - x0, y1 - y0
            seglen2 = dx * dx + dy * dy
            t = np.clip(((px - x0) * dx + (py - y0) * dy) / seglen2, 0.0, 1.0)
            d2 = (px - (x0 + t * dx)) ** 2 + (py - (y0 + t * dy)) ** 2
            dist = np.minimum(dist, d2)
        return dist <= (width / 2) ** 2

    mask = ribbon()
    if rng.random() < extra_prob:
        mask |= ribbon()
    return mask


def _shadow_mask(rng, res: int, count_range) -> np.ndarray:
    mask = np.zeros((res, res), dtype=bool)
    py, px = np.mgrid[0:res, 0:res]
    for _ in range(int(rng.integers(count_range[0], count_range[1] + 1))):
        cx, cy = rng.uniform(0, res, size=2)
        a = rng.uniform(res * 0.15, res * 0.45)
        b = rng.uniform(res * 0.08, res * 0.3)
        theta = rng.uniform(0, np.pi)
        xr = (px - cx) * np.cos(theta) + (py - cy) * np.sin(theta)
        yr = -(px - cx) * np.sin(theta) + (py - cy) * np.cos(theta)
        mask |= (xr / a) ** 2 + (yr / b) ** 2 <= 1.0
    return mask


def render_sample(rng, cfg: SynthConfig) -> dict:
    """All arrays for one sample, before any file is written."""
    res = cfg.resolution
    road = _road_mask(rng, res, cfg.extra_roads_prob)
    shadow = _shadow_mask(rng, res, cfg.shadow_count)

    # image: green-ish textured ground, gray road, multiplicative shadows
    noise = rng.normal(0, 1, size=(res, res))
    blotch = smooth_noise(rng, res, 6)
    img = np.empty((res, res, 3))
    img[..., 0] = 78 + 18 * blotch + 6 * noise
    img[..., 1] = 112 + 26 * blotch + 7 * noise
    img[..., 2] = 64 + 14 * blotch + 6 * noise
    road_gray = 118 + 7 * rng.normal(0, 1, size=(res, res))
    img[road] = road_gray[road][:, None] + rng.normal(0, 2.0, size=(int(road.sum()), 3))
    shade = np.where(shadow, rng.uniform(0.38, 0.52), 1.0)
    img *= shade[..., None]
    img = np.clip(img, 0, 255).astype(np.uint8)

    # terrain + LiDAR returns: one candidate point per pixel, dropped in blobs
    bumps = smooth_noise(rng, res, 5) * 1.5 + 0.25 * rng.random((res, res))
    height = np.where(road, 0.02 * rng.random((res, res)), bumps)
    intensity = np.where(
        road, 0.22 + 0.04 * rng.normal(0, 1, size=(res, res)),
        0.55 + 0.08 * rng.normal(0, 1, size=(res, res)),
    ).clip(0.01, 1.0)
    blobs = smooth_noise(rng, res, 5) + 0.05 * rng.random((res, res))
    void = blobs < np.quantile(blobs, cfg.void_fraction)
    keep = ~void

    fx = fy = res * 0.8
    cx = cy = res / 2.0
    py, px = np.mgrid[0:res, 0:res]
    jitter_x = rng.uniform(-0.3, 0.3, size=(res, res))
    jitter_y = rng.uniform(-0.3, 0.3, size=(res, res))
    z = CAMERA_HEIGHT_M - height
    x = (px + jitter_x - cx) / fx * z
    y = (py + jitter_y - cy) / fy * z
    xyz = np.stack([x[keep], y[keep], z[keep]], axis=1)
    labels_pts = road[keep].astype(np.int64)
    cloud = geom.PointCloud(xyz, intensity[keep], labels=labels_pts)

    shadow_over_road = float((shadow & road).sum() / max(road.sum(), 1))
    return {
        "image": img,
        "labels": road.astype(np.uint8),
        "cloud": cloud,
        "cam": geom.CalibratedCamera(fx, fy, cx, cy, np.eye(3), np.zeros(3)),
        "void_fraction": float(void.mean()),
        "shadow_over_road": shadow_over_road,
    }


def _split_frames(cloud: geom.PointCloud, n_frames: int, rng):
    """Partition the cloud into frames with small relative poses; accumulating
    the frames under those poses reconstructs the original cloud."""
    poses = [np.eye(4)]
    for k in range(1, n_frames):
        t = np.eye(4)
        angle = rng.uniform(-0.02, 0.02)
        c, s = np.cos(angle), np.sin(angle)
        t[:2, :2] = [[c, -s], [s, c]]
        t[:3, 3] = [rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.05, 0.05)]
        poses.append(t)
    frames = []
    n = len(cloud)
    for k in range(n_frames):
        sel = np.arange(k, n, n_frames)
        inv = np.linalg.inv(poses[k])
        frames.append(
            geom.PointCloud(geom.apply_rigid(cloud.xyz[sel], inv), cloud.intensity[sel],
                            labels=cloud.labels[sel] if cloud.labels is not None else None)
        )
    return frames, poses


def generate_dataset(root, cfg: SynthConfig) -> list[Path]:
    """Write cfg.n samples under root; returns the sample directories."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    dirs = []
    for idx in range(cfg.n):
        rng = np.random.default_rng([cfg.seed, idx])
        data = render_sample(rng, cfg)
        d = root / f"sample_{idx:04d}"
        d.mkdir(exist_ok=True)
        imgio.write_ppm(d / "image.ppm", data["image"])
        imgio.write_pgm(d / "labels.pgm", data["labels"])
        frames, poses = _split_frames(data["cloud"], cfg.cloud_frames, rng)
        for k, frame in enumerate(frames):
            geom.save_cloud(d / f"cloud_{k:02d}.txt", frame)
        geom.save_poses(d / "poses.txt", poses)
        geom.save_calib(d / "calib.txt", data["cam"])
        meta = {
            "index": idx,
            "seed": cfg.seed,
            "void_fraction": data["void_fraction"],
            "shadow_over_road": data["shadow_over_road"],
        }
        (d / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
        dirs.append(d)
    return dirs


def sample_dirs(root) -> list[Path]:
    return sorted(p for p in Path(root).iterdir() if p.is_dir() and p.name.startswith("sample_"))


def load_sample(d, max_range: float = 120.0) -> Sample:
    d = Path(d)
    image = imgio.read_ppm(d / "image.ppm").astype(np.float32).transpose(2, 0, 1) / 255.0
    labels = imgio.read_pgm(d / "labels.pgm").astype(np.int64)
    cam = geom.load_calib(d / "calib.txt")
    poses = geom.load_poses(d / "poses.txt")
    frames = [geom.load_cloud(d / f"cloud_{k:02d}.txt") for k in range(len(poses))]
    cloud = geom.accumulate(frames, poses)
    h, w = labels.shape
    rast = geom.project_rasterize(cloud, cam, h, w)
    channels = rast.channels.copy()
    channels[0] /= max_range
    channels[2] /= HEIGHT_NORM_M
    meta = json.loads((d / "meta.json").read_text()) if (d / "meta.json").exists() else {}
    return Sample(image=image, raster=channels.astype(np.float32),
                  void_mask=rast.void_mask, labels=labels, meta=meta)


def load_dataset(root, max_range: float = 120.0) -> list[Sample]:
    return [load_sample(d, max_range) for d in sample_dirs(root)]


def label_counts(samples, n_classes: int = 2) -> np.ndarray:
    counts = np.zeros(n_classes, dtype=np.int64)
    for s in samples:
        counts += np.bincount(s.labels.reshape(-1), minlength=n_classes)[:n_classes]
    return counts


def dataset_digest(root) -> str:
    """SHA-256 over every file (sorted paths); byte-identical reruns match."""
    h = hashlib.sha256()
    root = Path(root)
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()
