"""Deterministic synthetic surround-camera scenes.

A rig of K outward-facing pinhole cameras sits on a small ring at the
origin. Objects are 9-parameter boxes scattered on the ground plane
around the rig; each is rendered into every camera that sees it as a
filled, class-colored convex silhouette (the hull of its 8 projected
corners) over a noisy gray background, far-to-near so nearer objects
occlude. Apparent size follows true perspective. Velocity is additionally
encoded as a brightness gradient across the silhouette; still images
carry no motion, so this synthetic-only cue is what makes velocity a
learnable output.

Everything is a pure function of (spec, seed).
"""

from __future__ import annotations

import base64
import os
from dataclasses import dataclass, fields

import numpy as np

from .boxes import corners_3d, wrap_angle
from .geometry import CameraMatrix, project_points, validate_rig, visible_camera_count

Bounds = tuple[tuple[float, float], tuple[float, float], tuple[float, float]]

PALETTE = np.array(
    [
        [0.90, 0.15, 0.15],
        [0.15, 0.80, 0.20],
        [0.20, 0.35, 0.95],
        [0.95, 0.85, 0.20],
        [0.85, 0.20, 0.85],
        [0.20, 0.85, 0.85],
        [0.95, 0.55, 0.15],
        [0.60, 0.30, 0.10],
        [0.70, 0.90, 0.50],
        [0.50, 0.50, 0.90],
    ]
)

BACKGROUND = 0.35
VELOCITY_SHADE = 0.10  # red/blue channel slope per m/s across a silhouette
HEADING_SHADE = 0.35  # brightness ramp along the heading axis (makes yaw observable)


@dataclass(frozen=True)
class SceneSpec:
    num_cameras: int = 6
    image_width: int = 128
    image_height: int = 128
    bounds: Bounds = ((-11.0, 11.0), (-11.0, 11.0), (0.0, 2.5))
    min_objects: int = 3
    max_objects: int = 8
    num_classes: int = 4
    velocity_range: float = 2.0
    hfov_deg: float = 70.0
    ring_radius: float = 0.8
    camera_height: float = 1.0
    min_radius: float = 3.5
    max_radius: float = 10.5
    min_separation: float = 1.8
    noise: float = 0.03

    def __post_init__(self):
        if self.num_cameras < 1:
            raise ValueError("need at least one camera")
        if self.image_width % 64 or self.image_height % 64:
            raise ValueError("image size must be divisible by 64")
        if self.min_objects > self.max_objects or self.min_objects < 0:
            raise ValueError("bad object count range")


@dataclass
class Scene:
    spec: SceneSpec
    seed: int
    rig: list[CameraMatrix]
    images: np.ndarray  # (K, H, W, 3) uint8
    boxes: np.ndarray  # (M, 9)
    labels: np.ndarray  # (M,) int
    attributes: np.ndarray  # (M,) int


def class_attribute(label: int) -> int:
    """The categorical attribute carried by a box, derived from its class."""
    return int(label) % 2


def make_rig(spec: SceneSpec) -> list[CameraMatrix]:
    """K pinhole cameras on a ring, yaw-spaced 360/K degrees, looking out.

    The horizontal field of view (default ~70 degrees) exceeds the 60
    degree spacing of a 6-camera rig, so adjacent view frusta overlap.
    """
    w, h = spec.image_width, spec.image_height
    f = (w / 2.0) / np.tan(np.deg2rad(spec.hfov_deg) / 2.0)
    intr = np.array([[f, 0.0, w / 2.0], [0.0, f, h / 2.0], [0.0, 0.0, 1.0]])
    rig = []
    for m in range(spec.num_cameras):
        theta = 2.0 * np.pi * m / spec.num_cameras
        c, s = np.cos(theta), np.sin(theta)
        forward = np.array([c, s, 0.0])
        right = np.array([s, -c, 0.0])
        down = np.array([0.0, 0.0, -1.0])
        rot = np.stack([right, down, forward])
        pos = spec.ring_radius * forward + np.array([0.0, 0.0, spec.camera_height])
        ext = np.column_stack([rot, -rot @ pos])
        rig.append(CameraMatrix(T=intr @ ext, width=w, height=h))
    validate_rig(rig)
    return rig


def gen_scene(spec: SceneSpec, seed: int) -> Scene:
    """Sample a scene: boxes with classes, attributes and velocities, plus
    rendered images. Boxes are rejection-sampled until every one is inside
    the scene bounds, visible to at least one camera, and separated from
    its neighbors in the ground plane."""
    rng = np.random.default_rng((seed, 0xC0FFEE))
    rig = make_rig(spec)
    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    boxes = []
    labels = []
    tries = 0
    while len(boxes) < count:
        tries += 1
        if tries > 200 * max(count, 1):
            raise RuntimeError("cannot place objects under spec constraints")
        radius = rng.uniform(spec.min_radius, spec.max_radius)
        angle = rng.uniform(0.0, 2.0 * np.pi)
        w = rng.uniform(1.2, 2.8)
        l = rng.uniform(1.2, 2.8)
        h = rng.uniform(1.0, 2.2)
        yaw = wrap_angle(rng.uniform(-np.pi, np.pi))
        vx, vy = rng.uniform(-spec.velocity_range, spec.velocity_range, size=2)
        label = int(rng.integers(spec.num_classes))
        x, y, z = radius * np.cos(angle), radius * np.sin(angle), h / 2.0
        box = np.array([x, y, z, w, l, h, yaw, vx, vy])
        (xb, yb, zb) = spec.bounds
        if not (xb[0] <= x <= xb[1] and yb[0] <= y <= yb[1] and zb[0] <= z <= zb[1]):
            continue
        if any(np.hypot(x - b[0], y - b[1]) < spec.min_separation for b in boxes):
            continue
        if visible_camera_count(rig, box[:3]) < 1:
            continue
        boxes.append(box)
        labels.append(label)
    boxes = np.array(boxes).reshape(-1, 9)
    labels = np.array(labels, dtype=np.int64)
    attributes = np.array([class_attribute(c) for c in labels], dtype=np.int64)
    images = render_boxes(spec, rig, boxes, labels, seed)
    return Scene(
        spec=spec, seed=seed, rig=rig, images=images,
        boxes=boxes, labels=labels, attributes=attributes,
    )


def _convex_hull(pts: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain; returns hull vertices counterclockwise."""
    pts = np.unique(np.round(pts, 9), axis=0)
    if len(pts) <= 2:
        return pts
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]

    def half(seq):
        out = []
        for p in seq:
            while len(out) >= 2:
                a, b = out[-2], out[-1]
                if (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) > 0:
                    break
                out.pop()
            out.append(p)
        return out

    lower = half(pts)
    upper = half(pts[::-1])
    return np.array(lower[:-1] + upper[:-1])


def render_boxes(
    spec: SceneSpec, rig, boxes: np.ndarray, labels: np.ndarray, seed: int
) -> np.ndarray:
    """Rasterize boxes into every camera; returns (K, H, W, 3) uint8."""
    rng = np.random.default_rng((seed, 0x5EED))
    k = len(rig)
    h, w = spec.image_height, spec.image_width
    canvases = BACKGROUND + spec.noise * rng.uniform(-1.0, 1.0, size=(k, h, w, 3))

    for m, cam in enumerate(rig):
        theta = 2.0 * np.pi * m / max(len(rig), 1)
        fwd = np.array([np.cos(theta), np.sin(theta)])
        rightdir = np.array([np.sin(theta), -np.cos(theta)])
        centers = boxes[:, :3] if len(boxes) else np.zeros((0, 3))
        _, depth, _ = project_points(cam, centers) if len(boxes) else (None, np.zeros(0), None)
        order = np.argsort(-depth)  # far to near
        for j in order:
            box = boxes[j]
            corners = corners_3d(box)
            uv, cdepth, _ = project_points(cam, corners)
            if np.any(cdepth < 0.2):
                continue
            pix = np.column_stack(
                [(uv[:, 0] + 1.0) * w / 2.0, (uv[:, 1] + 1.0) * h / 2.0]
            )
            if pix[:, 0].max() < 0 or pix[:, 0].min() > w or pix[:, 1].max() < 0 or pix[:, 1].min() > h:
                continue
            hull = _convex_hull(pix)
            if len(hull) < 3:
                continue
            base = PALETTE[labels[j] % len(PALETTE)]
            v_right = box[7] * rightdir[0] + box[8] * rightdir[1]
            v_fwd = box[7] * fwd[0] + box[8] * fwd[1]
            # heading in camera coordinates drives the yaw brightness ramp
            head_world = np.array([np.cos(box[6]), np.sin(box[6])])
            head_img = np.array([head_world @ rightdir, head_world @ fwd])
            _paint(canvases[m], hull, base, v_right, v_fwd, head_img)
    return np.clip(np.round(canvases * 255.0), 0, 255).astype(np.uint8)


def _paint(
    canvas: np.ndarray,
    hull: np.ndarray,
    base: np.ndarray,
    v_right: float,
    v_fwd: float,
    head_img: np.ndarray,
) -> None:
    h, w, _ = canvas.shape
    x0 = max(int(np.floor(hull[:, 0].min())), 0)
    x1 = min(int(np.ceil(hull[:, 0].max())) + 1, w)
    y0 = max(int(np.floor(hull[:, 1].min())), 0)
    y1 = min(int(np.ceil(hull[:, 1].max())) + 1, h)
    if x0 >= x1 or y0 >= y1:
        return
    xs = np.arange(x0, x1) + 0.5
    ys = np.arange(y0, y1) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    inside = np.ones(gx.shape, dtype=bool)
    for i in range(len(hull)):
        a, b = hull[i], hull[(i + 1) % len(hull)]
        inside &= (b[0] - a[0]) * (gy - a[1]) - (b[1] - a[1]) * (gx - a[0]) >= 0
    if not inside.any():
        return
    cx = 0.5 * (hull[:, 0].min() + hull[:, 0].max())
    cy = 0.5 * (hull[:, 1].min() + hull[:, 1].max())
    spanx = max(hull[:, 0].max() - hull[:, 0].min(), 1.0)
    spany = max(hull[:, 1].max() - hull[:, 1].min(), 1.0)
    xi = 2.0 * (gx - cx) / spanx
    eta = 2.0 * (gy - cy) / spany
    # brightness ramp along the projected heading axis resolves yaw
    brightness = 1.0 + HEADING_SHADE * (head_img[0] * xi + head_img[1] * eta)
    colors = np.clip(base[None, None, :] * brightness[:, :, None], 0.05, 1.0)
    # velocity rides on dedicated channel ramps
    colors[:, :, 0] = np.clip(colors[:, :, 0] + VELOCITY_SHADE * v_right * xi, 0.0, 1.0)
    colors[:, :, 2] = np.clip(colors[:, :, 2] + VELOCITY_SHADE * v_fwd * eta, 0.0, 1.0)
    region = canvas[y0:y1, x0:x1]
    region[inside] = colors[inside]


def render(scene: Scene) -> np.ndarray:
    """Re-rasterize a scene's boxes (pure function of its contents)."""
    return render_boxes(scene.spec, scene.rig, scene.boxes, scene.labels, scene.seed)


# ---------------------------------------------------------------------------
# scene files and dataset manifests (grammar documented in docs/FORMATS.md)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_scene(scene: Scene, path: str) -> None:
    spec = scene.spec
    lines = ["mvdet-scene 1", f"seed {scene.seed}"]
    for f in fields(SceneSpec):
        v = getattr(spec, f.name)
        if f.name == "bounds":
            flat = " ".join(_fmt(x) for pair in v for x in pair)
            lines.append(f"spec-bounds {flat}")
        elif isinstance(v, float):
            lines.append(f"spec-{f.name} {_fmt(v)}")
        else:
            lines.append(f"spec-{f.name} {v}")
    for cam in scene.rig:
        vals = " ".join(_fmt(x) for x in cam.T.reshape(-1))
        lines.append(f"camera {vals} {cam.width} {cam.height}")
    lines.append(f"objects {len(scene.boxes)}")
    for box, label, attr in zip(scene.boxes, scene.labels, scene.attributes):
        vals = " ".join(_fmt(x) for x in box)
        lines.append(f"object {int(label)} {int(attr)} {vals}")
    for m in range(len(scene.rig)):
        payload = base64.b64encode(scene.images[m].tobytes()).decode("ascii")
        lines.append(f"image {m} {payload}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def read_scene(path: str) -> Scene:
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or lines[0].split() != ["mvdet-scene", "1"]:
        raise ValueError(f"{path}: not a scene file")
    spec_kwargs = {}
    seed = 0
    cams = []
    objects = []
    images = {}
    for ln in lines[1:]:
        tok = ln.split()
        key = tok[0]
        if key == "seed":
            seed = int(tok[1])
        elif key == "spec-bounds":
            vals = [float(x) for x in tok[1:]]
            spec_kwargs["bounds"] = ((vals[0], vals[1]), (vals[2], vals[3]), (vals[4], vals[5]))
        elif key.startswith("spec-"):
            name = key[5:]
            ftype = {f.name: f.type for f in fields(SceneSpec)}.get(name)
            if ftype is None:
                raise ValueError(f"{path}: unknown spec field {name}")
            spec_kwargs[name] = float(tok[1]) if "float" in str(ftype) else int(tok[1])
        elif key == "camera":
            vals = [float(x) for x in tok[1:13]]
            cams.append(CameraMatrix(np.array(vals).reshape(3, 4), int(tok[13]), int(tok[14])))
        elif key == "objects":
            pass
        elif key == "object":
            objects.append((int(tok[1]), int(tok[2]), [float(x) for x in tok[3:12]]))
        elif key == "image":
            images[int(tok[1])] = base64.b64decode(tok[2])
        else:
            raise ValueError(f"{path}: unknown record '{key}'")
    spec = SceneSpec(**spec_kwargs)
    validate_rig(cams)
    h, w = spec.image_height, spec.image_width
    raster = np.zeros((len(cams), h, w, 3), dtype=np.uint8)
    for m in range(len(cams)):
        raster[m] = np.frombuffer(images[m], dtype=np.uint8).reshape(h, w, 3)
    boxes = np.array([o[2] for o in objects], dtype=np.float64).reshape(-1, 9)
    labels = np.array([o[0] for o in objects], dtype=np.int64)
    attrs = np.array([o[1] for o in objects], dtype=np.int64)
    return Scene(spec=spec, seed=seed, rig=cams, images=raster,
                 boxes=boxes, labels=labels, attributes=attrs)


def gen_split(spec: SceneSpec, train_seeds, val_seeds, out_dir: str) -> str:
    """Write scene files for disjoint train/val seed sets plus a manifest.

    Returns the manifest path. Re-running with the same arguments writes
    identical bytes.
    """
    train_seeds = list(train_seeds)
    val_seeds = list(val_seeds)
    if set(train_seeds) & set(val_seeds):
        raise ValueError("train and val seed sets overlap")
    os.makedirs(os.path.join(out_dir, "scenes"), exist_ok=True)
    entries = []
    for split, seeds in (("train", train_seeds), ("val", val_seeds)):
        for s in seeds:
            rel = os.path.join("scenes", f"{split}_{s:06d}.scene")
            write_scene(gen_scene(spec, s), os.path.join(out_dir, rel))
            entries.append((split, rel))
    manifest = os.path.join(out_dir, "manifest.txt")
    with open(manifest, "w", encoding="ascii") as fh:
        fh.write("mvdet-manifest 1\n")
        for split, rel in entries:
            fh.write(f"{split} {rel}\n")
    return manifest


def read_manifest(path: str) -> dict[str, list[str]]:
    base = os.path.dirname(os.path.abspath(path))
    out: dict[str, list[str]] = {"train": [], "val": []}
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().split()
        if header != ["mvdet-manifest", "1"]:
            raise ValueError(f"{path}: not a manifest")
        for ln in fh:
            if not ln.strip():
                continue
            split, rel = ln.split()
            out.setdefault(split, []).append(os.path.join(base, rel))
    return out
