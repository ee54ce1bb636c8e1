"""Conversion of beam-wise lidar returns into a velocity-intensity raster.

Each hit beam is densified by sampling points from the hit range outward to
the sensor limit at voxel spacing; every sample writes a decayed velocity
intensity ``decay^k * (v_beam + v_ego)`` into an ego-centered, world-aligned
grid (max-combine on collisions).  The ego vehicle itself is overlaid as a
rotated rectangular footprint filled with its own speed.  The grid is
normalized by the scale constant (the scenario's top speed), clamped to
[0, 1], and expanded to three equal channels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

__all__ = ["LidarImageSpec", "lidar_to_grid", "lidar_to_image", "write_pgm"]


@dataclass(frozen=True)
class LidarImageSpec:
    d_max: float = 60.0
    voxel_size: float = 1.0
    decay: float = 0.98
    colormap: str = "grayscale"
    scale: float = 30.0  # normalization constant; the scenario's v_max
    ego_length: float = 5.0
    ego_width: float = 2.0

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise ConfigError("voxel_size must be positive")
        if self.colormap != "grayscale":
            raise ConfigError(f"unknown colormap {self.colormap!r}")

    @property
    def grid_side(self) -> int:
        return int(math.ceil(2.0 * self.d_max / self.voxel_size))


def _to_cell(coord: np.ndarray, spec: LidarImageSpec) -> np.ndarray:
    idx = np.floor((coord + spec.d_max) / spec.voxel_size).astype(np.int64)
    return np.clip(idx, 0, spec.grid_side - 1)


def lidar_to_grid(beams, ego_speed: float, ego_heading: float,
                  spec: LidarImageSpec) -> np.ndarray:
    """Unnormalized intensity grid [side, side]; rows index y, columns x."""
    beams = np.asarray(beams, dtype=np.float64)
    if beams.ndim != 2 or beams.shape[1] != 2:
        raise ConfigError(f"beams must be [N, 2] (range, radial velocity), got {beams.shape}")
    n = beams.shape[0]
    side = spec.grid_side
    grid = np.zeros((side, side), np.float64)

    angles = ego_heading + 2.0 * math.pi * np.arange(n) / n
    for i in range(n):
        r, v = beams[i]
        if r >= 1.0:  # no return on this beam
            continue
        hit = r * spec.d_max
        k_max = int(math.floor((spec.d_max - hit) / spec.voxel_size))
        k = np.arange(k_max + 1)
        d = hit + k * spec.voxel_size
        x = d * math.cos(angles[i])
        y = d * math.sin(angles[i])
        z = spec.decay ** k * (v + ego_speed)
        rows = _to_cell(y, spec)
        cols = _to_cell(x, spec)
        np.maximum.at(grid, (rows, cols), z)

    # Ego footprint: cells whose centers fall inside the rotated rectangle.
    centers = (np.arange(side) + 0.5) * spec.voxel_size - spec.d_max
    xs, ys = np.meshgrid(centers, centers)  # indexed [row=y, col=x]
    c, s = math.cos(ego_heading), math.sin(ego_heading)
    xr = c * xs + s * ys
    yr = -s * xs + c * ys
    inside = (np.abs(xr) <= spec.ego_length / 2.0) & (np.abs(yr) <= spec.ego_width / 2.0)
    grid[inside] = ego_speed
    return grid


def lidar_to_image(beams, ego_speed: float, ego_heading: float,
                   spec: LidarImageSpec) -> np.ndarray:
    """Normalized 3-channel raster [3, side, side] with equal channels."""
    grid = lidar_to_grid(beams, ego_speed, ego_heading, spec)
    norm = np.clip(grid / spec.scale, 0.0, 1.0).astype(np.float32)
    return np.repeat(norm[None], 3, axis=0)


def write_pgm(path, image01: np.ndarray) -> None:
    """Write a [H, W] array of values in [0, 1] as a binary P5 PGM."""
    img = np.asarray(image01)
    if img.ndim == 3:
        img = img[0]
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())
