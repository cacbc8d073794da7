"""9-parameter 3D boxes and angle/corner helpers.

Parameter layout, used everywhere a box travels as a row of 9 floats:

    [x, y, z, w, l, h, yaw, vx, vy]

(x, y, z) is the box center in meters; (w, l) the footprint extents along
the box's local x/y axes; h the vertical extent; yaw the heading around
+z in radians, measured from the world x-axis; (vx, vy) the ground-plane
velocity in m/s.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class Box3D:
    x: float
    y: float
    z: float
    w: float
    l: float
    h: float
    yaw: float
    vx: float
    vy: float

    def to_array(self) -> np.ndarray:
        return np.array(
            [self.x, self.y, self.z, self.w, self.l, self.h, self.yaw, self.vx, self.vy],
            dtype=np.float64,
        )

    @staticmethod
    def from_array(a) -> "Box3D":
        a = np.asarray(a, dtype=np.float64)
        return Box3D(*(float(v) for v in a))


def wrap_angle(a):
    """Wrap radians into (-pi, pi]."""
    a = np.asarray(a, dtype=np.float64)
    out = a - TWO_PI * np.floor((a + np.pi) / TWO_PI)
    out = np.where(out <= -np.pi, out + TWO_PI, out)
    if out.ndim == 0:
        return float(out)
    return out


def bev_corners(box) -> np.ndarray:
    """The 4 footprint corners of a box, counterclockwise, shape (4, 2)."""
    b = box.to_array() if isinstance(box, Box3D) else np.asarray(box, dtype=np.float64)
    cx, cy, w, l, yaw = b[0], b[1], b[3], b[4], b[6]
    c, s = np.cos(yaw), np.sin(yaw)
    half = np.array(
        [[w / 2, l / 2], [-w / 2, l / 2], [-w / 2, -l / 2], [w / 2, -l / 2]]
    )
    rot = np.array([[c, -s], [s, c]])
    return half @ rot.T + np.array([cx, cy])


def corners_3d(box) -> np.ndarray:
    """All 8 corners of a box in world coordinates, shape (8, 3)."""
    b = box.to_array() if isinstance(box, Box3D) else np.asarray(box, dtype=np.float64)
    bev = bev_corners(b)
    z0, z1 = b[2] - b[5] / 2.0, b[2] + b[5] / 2.0
    bottom = np.column_stack([bev, np.full(4, z0)])
    top = np.column_stack([bev, np.full(4, z1)])
    return np.vstack([bottom, top])
