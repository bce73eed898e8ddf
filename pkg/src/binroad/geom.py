"""Point-cloud handling: accumulation under given poses, pinhole projection
into the camera frame, rasterization to the image grid, and void masks.

Rasterization uses a z-buffer (nearest depth wins, ties broken by smallest
point index) so results are deterministic and independent of point order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

IGNORE_LABEL = 255
RASTER_CHANNELS = ("depth", "intensity", "height", "occupancy")


@dataclass
class PointCloud:
    xyz: np.ndarray  # (N, 3) meters
    intensity: np.ndarray  # (N,)
    labels: np.ndarray | None = None  # (N,) int

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
        if self.xyz.shape[0] != self.intensity.shape[0]:
            raise ValueError("xyz and intensity lengths differ")
        if not np.isfinite(self.xyz).all():
            raise ValueError("non-finite point coordinates")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if self.labels.shape[0] != self.xyz.shape[0]:
                raise ValueError("labels length differs from point count")

    def __len__(self):
        return self.xyz.shape[0]


@dataclass
class CalibratedCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # (3, 3) LiDAR -> camera
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        err = np.linalg.norm(self.rotation.T @ self.rotation - np.eye(3))
        if err > 1e-6:
            raise ValueError(f"rotation not orthonormal (||R^T R - I|| = {err:.2e})")

    def scaled(self, k: float) -> "CalibratedCamera":
        return CalibratedCamera(self.fx * k, self.fy * k, self.cx * k, self.cy * k,
                                self.rotation, self.translation)


@dataclass
class RasterizedCloud:
    channels: np.ndarray  # (4, H, W): depth, intensity, height-above-min, occupancy
    void_mask: np.ndarray  # (H, W) uint8, 0 exactly where no point landed


def check_rigid(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(4, 4)
    r = t[:3, :3]
    if np.linalg.norm(r.T @ r - np.eye(3)) > 1e-6 or np.abs(t[3] - [0, 0, 0, 1]).max() > 1e-9:
        raise ValueError("pose is not a rigid transform")
    return t


def apply_rigid(xyz: np.ndarray, t: np.ndarray) -> np.ndarray:
    return xyz @ t[:3, :3].T + t[:3, 3]


def accumulate(frames: list[PointCloud], poses: list[np.ndarray]) -> PointCloud:
    """Union of pose-transformed frames in the reference frame of the first pose."""
    if len(frames) != len(poses):
        raise ValueError(f"{len(frames)} frames but {len(poses)} poses")
    if not frames:
        raise ValueError("no frames to accumulate")
    t0_inv = np.linalg.inv(check_rigid(poses[0]))
    parts, intens, labels = [], [], []
    all_labelled = all(f.labels is not None for f in frames)
    for frame, pose in zip(frames, poses):
        rel = t0_inv @ check_rigid(pose)
        parts.append(apply_rigid(frame.xyz, rel))
        intens.append(frame.intensity)
        if all_labelled:
            labels.append(frame.labels)
    return PointCloud(
        xyz=np.concatenate(parts),
        intensity=np.concatenate(intens),
        labels=np.concatenate(labels) if all_labelled else None,
    )


def project_points(cloud: PointCloud, cam: CalibratedCamera):
    """Pinhole projection; returns (u, v, z_cam, in_front) for every point."""
    pc = apply_rigid(cloud.xyz, np.block([[cam.rotation, cam.translation[:, None]], [np.zeros((1, 3)), 1.0]]))
    z = pc[:, 2]
    in_front = z > 0
    zsafe = np.where(in_front, z, 1.0)
    u = cam.fx * pc[:, 0] / zsafe + cam.cx
    v = cam.fy * pc[:, 1] / zsafe + cam.cy
    return u, v, z, in_front


def _zbuffer_winners(cloud: PointCloud, cam: CalibratedCamera, h: int, w: int):
    """Per-pixel winning point index (-1 where void): nearest z, then lowest index."""
    u, v, z, in_front = project_points(cloud, cam)
    px = np.rint(u).astype(np.int64)
    py = np.rint(v).astype(np.int64)
    ok = in_front & (px >= 0) & (px < w) & (py >= 0) & (py < h)
    idx = np.nonzero(ok)[0]
    winners = np.full(h * w, -1, dtype=np.int64)
    if idx.size:
        order = np.lexsort((idx, z[idx]))[::-1]  # descending (z, index)
        chosen = idx[order]
        winners[py[chosen] * w + px[chosen]] = chosen  # last write = nearest, lowest index
    return winners.reshape(h, w), z


def project_rasterize(cloud: PointCloud, cam: CalibratedCamera, h: int, w: int) -> RasterizedCloud:
    """Rasterize to depth/intensity/height/occupancy channels plus a void mask.

    An empty in-frustum set yields an all-void raster (valid output). The
    height channel is elevation above the cloud minimum along the reference
    frame's z axis, computed before the camera transform.
    """
    winners, z = _zbuffer_winners(cloud, cam, h, w)
    channels = np.zeros((4, h, w), dtype=np.float32)
    occupied = winners >= 0
    if occupied.any():
        win = winners[occupied]
        height = cloud.xyz[:, 2] - cloud.xyz[:, 2].min() if len(cloud) else 0.0
        channels[0][occupied] = z[win]
        channels[1][occupied] = cloud.intensity[win]
        channels[2][occupied] = height[win]
        channels[3][occupied] = 1.0
    return RasterizedCloud(channels=channels, void_mask=occupied.astype(np.uint8))


def labels_to_raster(cloud: PointCloud, cam: CalibratedCamera, h: int, w: int,
                     ignore: int = IGNORE_LABEL):
    """Per-pixel label of the z-buffer winner; void pixels get the ignore value."""
    if cloud.labels is None:
        raise ValueError("cloud has no labels")
    winners, _ = _zbuffer_winners(cloud, cam, h, w)
    label_map = np.full((h, w), ignore, dtype=np.int64)
    occupied = winners >= 0
    label_map[occupied] = cloud.labels[winners[occupied]]
    return label_map, occupied.astype(np.uint8)


# ---------------------------------------------------------------------------
# file formats
#
# cloud: first line is the point count, then one point per line:
#        x y z intensity [label]
# poses: one 4x4 rigid transform per line, 16 values row-major
# calib: "fx v", "fy v", "cx v", "cy v", "R r00 ... r22", "t x y z"


def save_cloud(path, cloud: PointCloud):
    with open(path, "w") as f:
        f.write(f"{len(cloud)}\n")
        for i in range(len(cloud)):
            x, y, z = (float(v) for v in cloud.xyz[i])
            line = f"{x!r} {y!r} {z!r} {float(cloud.intensity[i])!r}"
            if cloud.labels is not None:
                line += f" {int(cloud.labels[i])}"
            f.write(line + "\n")


def load_cloud(path) -> PointCloud:
    with open(path) as f:
        n = int(f.readline())
        rows = [f.readline().split() for _ in range(n)]
    if not rows:
        return PointCloud(np.zeros((0, 3)), np.zeros(0))
    width = len(rows[0])
    data = np.array([[float(v) for v in r] for r in rows])
    labels = data[:, 4].astype(np.int64) if width >= 5 else None
    return PointCloud(xyz=data[:, :3], intensity=data[:, 3], labels=labels)


def save_poses(path, poses):
    with open(path, "w") as f:
        for t in poses:
            f.write(" ".join(repr(float(v)) for v in np.asarray(t).reshape(16)) + "\n")


def load_poses(path):
    with open(path) as f:
        return [check_rigid(np.array([float(v) for v in line.split()]).reshape(4, 4))
                for line in f if line.strip()]


def save_calib(path, cam: CalibratedCamera):
    with open(path, "w") as f:
        for key in ("fx", "fy", "cx", "cy"):
            f.write(f"{key} {getattr(cam, key)!r}\n")
        f.write("R " + " ".join(repr(float(v)) for v in cam.rotation.reshape(9)) + "\n")
        f.write("t " + " ".join(repr(float(v)) for v in cam.translation) + "\n")


def load_calib(path) -> CalibratedCamera:
    vals = {}
    with open(path) as f:
        for line in f:
            parts = line.split()
            if parts:
                vals[parts[0]] = [float(v) for v in parts[1:]]
    return CalibratedCamera(
        fx=vals["fx"][0], fy=vals["fy"][0], cx=vals["cx"][0], cy=vals["cy"][0],
        rotation=np.array(vals["R"]).reshape(3, 3), translation=np.array(vals["t"]),
    )
