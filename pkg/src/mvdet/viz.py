"""Overlay rendering: predicted and ground-truth boxes drawn over camera
images and a birds-eye-view canvas."""

from __future__ import annotations

import os

import numpy as np
from PIL import Image

from .boxes import bev_corners, corners_3d
from .geometry import denormalize_uv, project_points
from .synth import PALETTE

GT_COLOR = np.array([1.0, 1.0, 1.0])
EDGES = [
    (0, 1), (1, 2), (2, 3), (3, 0),
    (4, 5), (5, 6), (6, 7), (7, 4),
    (0, 4), (1, 5), (2, 6), (3, 7),
]


def box_corner_pixels(cam, box) -> tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates of a box's 8 corners in one camera.

    Returns (pixels (8, 2), in_front (8,) bool). Pixels for behind-camera
    corners are unusable and flagged accordingly.
    """
    corners = corners_3d(box)
    uv_norm, depth, _ = project_points(cam, corners)
    pix = denormalize_uv(uv_norm, cam.width, cam.height)
    return pix, depth > 0.0


def _draw_line(img: np.ndarray, p0, p1, color: np.ndarray) -> None:
    h, w, _ = img.shape
    n = int(max(abs(p1[0] - p0[0]), abs(p1[1] - p0[1])) * 2) + 2
    ts = np.linspace(0.0, 1.0, n)
    xs = np.round(p0[0] + ts * (p1[0] - p0[0])).astype(int)
    ys = np.round(p0[1] + ts * (p1[1] - p0[1])).astype(int)
    keep = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
    img[ys[keep], xs[keep]] = color


def draw_box_on_image(img: np.ndarray, cam, box, color: np.ndarray) -> None:
    """Draw the wireframe of a box into a float image in [0, 1]."""
    pix, front = box_corner_pixels(cam, box)
    for a, b in EDGES:
        if front[a] and front[b]:
            _draw_line(img, pix[a], pix[b], color)


def bev_canvas(boxes_with_colors, bounds, size: int = 512) -> np.ndarray:
    """Top-down view: box footprints drawn inside the scene bounds."""
    img = np.zeros((size, size, 3))
    (x0, x1), (y0, y1), _ = bounds

    def to_px(pt):
        u = (pt[0] - x0) / (x1 - x0) * (size - 1)
        v = (1.0 - (pt[1] - y0) / (y1 - y0)) * (size - 1)
        return np.array([u, v])

    for box, color in boxes_with_colors:
        corners = bev_corners(box)
        for i in range(4):
            _draw_line(img, to_px(corners[i]), to_px(corners[(i + 1) % 4]), color)
    return img


def save_image(img: np.ndarray, path: str) -> None:
    arr = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def render_overlays(
    scene,
    layer_outputs,
    out_dir: str,
    per_layer: bool = False,
    score_threshold: float = 0.3,
) -> list[str]:
    """Write per-camera overlay images plus a BEV image; returns paths.

    Ground truth is white, predictions take their class color. With
    ``per_layer`` every refinement layer gets its own set of images,
    otherwise only the last layer is drawn.
    """
    os.makedirs(out_dir, exist_ok=True)
    layers = list(range(len(layer_outputs))) if per_layer else [len(layer_outputs) - 1]
    written = []
    for li in layers:
        out = layer_outputs[li]
        probs = 1.0 / (1.0 + np.exp(-out.class_logits.data))
        scores = probs.max(axis=1)
        labels = probs.argmax(axis=1)
        keep = np.flatnonzero(scores >= score_threshold)
        for m, cam in enumerate(scene.rig):
            img = scene.images[m].astype(np.float64) / 255.0
            for box in scene.boxes:
                draw_box_on_image(img, cam, box, GT_COLOR)
            for i in keep:
                color = PALETTE[labels[i] % len(PALETTE)]
                draw_box_on_image(img, cam, out.boxes.data[i], color)
            path = os.path.join(out_dir, f"layer{li}_cam{m}.png")
            save_image(img, path)
            written.append(path)
        pairs = [(b, GT_COLOR) for b in scene.boxes]
        pairs += [(out.boxes.data[i], PALETTE[labels[i] % len(PALETTE)]) for i in keep]
        path = os.path.join(out_dir, f"layer{li}_bev.png")
        save_image(bev_canvas(pairs, scene.spec.bounds), path)
        written.append(path)
    return written
