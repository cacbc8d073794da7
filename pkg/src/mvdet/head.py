"""Iterative set-prediction detection head.

A fixed-size set of learned query vectors is refined through L layers.
Each layer decodes a 3D reference point per query, projects it into all
cameras, averages the visible bilinear feature samples across cameras
and pyramid levels into the query (residual), then mixes queries with
multi-head self-attention and a feed-forward block (post-norm). Per
layer, two small MLPs decode a 9-parameter box (anchored at the layer's
reference point) and per-class logits from each query. The prediction
count is the query count at every layer; nothing filters the output set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import geometry, pyramid
from .autodiff import Tensor
from .boxes import wrap_angle

Bounds = tuple[tuple[float, float], tuple[float, float], tuple[float, float]]

DEFAULT_BOUNDS: Bounds = ((-11.0, 11.0), (-11.0, 11.0), (0.0, 2.5))

SIZE_LOG_LIMIT = 8.0  # |log size| cap, overflow guard only


@dataclass(frozen=True)
class HeadConfig:
    num_layers: int = 6
    num_queries: int = 900
    hidden: int = 256
    num_heads: int = 8
    num_classes: int = 4
    bounds: Bounds = DEFAULT_BOUNDS
    feature_eps: float = 1e-5
    encoder_channels: int = 32
    # max |center - reference point| per axis, meters; keeps every box near
    # its query's anchor so the bipartite matching stays spatially stable
    offset_limit: float = 2.5

    def __post_init__(self):
        if self.num_layers < 1 or self.num_queries < 1:
            raise ValueError("need at least one layer and one query")
        if self.hidden % self.num_heads != 0:
            raise ValueError("hidden size must divide evenly across attention heads")


@dataclass
class LayerOutput:
    """Predictions read off one refinement layer."""

    boxes: Tensor  # (M, 9) rows [x y z w l h yaw vx vy]
    class_logits: Tensor  # (M, num_classes)
    ref_points: np.ndarray  # (M, 3) detached reference points behind the boxes


def _glorot(rng, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    limit = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


QUERY_INIT_RANGE = 0.5


def init_queries(config: HeadConfig, seed: int) -> Tensor:
    """Learnable query vectors, centered uniform, deterministic per seed."""
    rng = np.random.default_rng(seed)
    r = QUERY_INIT_RANGE
    return ad.parameter(rng.uniform(-r, r, size=(config.num_queries, config.hidden)))


def init_head_params(config: HeadConfig, seed: int) -> dict[str, Tensor]:
    """All head parameters (queries, shared reference MLP, per-layer blocks)."""
    rng = np.random.default_rng(seed)
    c = config.hidden
    p: dict[str, Tensor] = {}
    r = QUERY_INIT_RANGE
    p["queries"] = ad.parameter(rng.uniform(-r, r, size=(config.num_queries, c)))

    # reference-point MLP, shared by every layer
    p["head.ref.fc1.w"] = ad.parameter(_glorot(rng, c, c))
    p["head.ref.fc1.b"] = ad.parameter(np.zeros(c))
    p["head.ref.fc2.w"] = ad.parameter(_glorot(rng, c, 3, gain=8.0))
    p["head.ref.fc2.b"] = ad.parameter(np.zeros(3))

    for layer in range(config.num_layers):
        pre = f"head.layer{layer}"
        for name in ("wq", "wk", "wv", "wo"):
            p[f"{pre}.attn.{name}"] = ad.parameter(_glorot(rng, c, c))
        for name in ("bq", "bk", "bv", "bo"):
            p[f"{pre}.attn.{name}"] = ad.parameter(np.zeros(c))
        p[f"{pre}.ln1.g"] = ad.parameter(np.ones(c))
        p[f"{pre}.ln1.b"] = ad.parameter(np.zeros(c))
        p[f"{pre}.ffn.fc1.w"] = ad.parameter(_glorot(rng, c, c))
        p[f"{pre}.ffn.fc1.b"] = ad.parameter(np.zeros(c))
        p[f"{pre}.ffn.fc2.w"] = ad.parameter(_glorot(rng, c, c))
        p[f"{pre}.ffn.fc2.b"] = ad.parameter(np.zeros(c))
        p[f"{pre}.ln2.g"] = ad.parameter(np.ones(c))
        p[f"{pre}.ln2.b"] = ad.parameter(np.zeros(c))
        p[f"{pre}.reg.fc1.w"] = ad.parameter(_glorot(rng, c, c))
        p[f"{pre}.reg.fc1.b"] = ad.parameter(np.zeros(c))
        p[f"{pre}.reg.fc2.w"] = ad.parameter(np.zeros((c, 9)))
        p[f"{pre}.reg.fc2.b"] = ad.parameter(np.zeros(9))
        p[f"{pre}.cls.fc1.w"] = ad.parameter(_glorot(rng, c, c))
        p[f"{pre}.cls.fc1.b"] = ad.parameter(np.zeros(c))
        p[f"{pre}.cls.fc2.w"] = ad.parameter(_glorot(rng, c, config.num_classes))
        p[f"{pre}.cls.fc2.b"] = ad.parameter(np.full(config.num_classes, -2.0))
    return p


def decode_reference(queries: Tensor, params: dict, bounds: Bounds) -> Tensor:
    """Reference points from queries: 2-layer MLP, sigmoid, affine to bounds."""
    h = ad.relu(ad.add(ad.matmul(queries, params["head.ref.fc1.w"]), params["head.ref.fc1.b"]))
    raw = ad.add(ad.matmul(h, params["head.ref.fc2.w"]), params["head.ref.fc2.b"])
    unit = ad.sigmoid(raw)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    return ad.add(ad.mul(unit, hi - lo), lo)


def gather_features(
    ref_points: Tensor,
    pyramids: list[Tensor],
    rig,
    eps: float = 1e-5,
) -> Tensor:
    """Visibility-masked average of bilinear samples over cameras and levels.

    ``pyramids`` holds one (K, h, w, C) tensor per level, camera-stacked.
    Every reference point is projected into every camera; samples from
    all pyramid levels of visible cameras are summed and divided by the
    visible-term count plus ``eps``, so a point seen by nobody yields a
    (near-)zero feature instead of a division error.
    """
    num_cams = len(rig)
    if pyramids and pyramids[0].data.shape[0] != num_cams:
        raise ValueError("pyramid and rig camera counts disagree")
    samples = []
    sigma_total = 0.0
    for m, cam in enumerate(rig):
        uv, depth, sigma = geometry.project_points_tracked(cam, ref_points)
        uv = ad.clip(uv, -1.0, 1.0)
        sigma_col = sigma[:, None]
        sigma_total = sigma_total + sigma * len(pyramids)
        for level in pyramids:
            fmap = ad.getitem(level, m)
            samples.append(ad.mul(pyramid.bilinear_sample(fmap, uv), sigma_col))
    denom = 1.0 / (sigma_total + eps)
    return ad.mul(ad.add_n(samples), denom[:, None])


def _attention(q: Tensor, params: dict, pre: str, num_heads: int) -> Tensor:
    m, c = q.data.shape
    dh = c // num_heads

    def heads(x):
        return ad.transpose(ad.reshape(x, (m, num_heads, dh)), (1, 0, 2))

    qs = heads(ad.add(ad.matmul(q, params[f"{pre}.wq"]), params[f"{pre}.bq"]))
    ks = heads(ad.add(ad.matmul(q, params[f"{pre}.wk"]), params[f"{pre}.bk"]))
    vs = heads(ad.add(ad.matmul(q, params[f"{pre}.wv"]), params[f"{pre}.bv"]))
    scores = ad.mul(ad.matmul(qs, ad.transpose(ks, (0, 2, 1))), 1.0 / np.sqrt(dh))
    mixed = ad.matmul(ad.softmax(scores, axis=-1), vs)  # (heads, M, dh)
    merged = ad.reshape(ad.transpose(mixed, (1, 0, 2)), (m, c))
    return ad.add(ad.matmul(merged, params[f"{pre}.wo"]), params[f"{pre}.bo"])


def refine_layer(
    queries: Tensor,
    pyramids: list[Tensor],
    rig,
    params: dict,
    layer: int,
    config: HeadConfig,
) -> Tensor:
    """One refinement step: feature residual, self-attention, feed-forward."""
    ref = decode_reference(queries, params, config.bounds)
    feats = gather_features(ref, pyramids, rig, eps=config.feature_eps)
    u = ad.add(queries, feats)

    pre = f"head.layer{layer}"
    attended = _attention(u, params, f"{pre}.attn", config.num_heads)
    u = ad.layer_norm(ad.add(u, attended), params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
    hidden = ad.relu(ad.add(ad.matmul(u, params[f"{pre}.ffn.fc1.w"]), params[f"{pre}.ffn.fc1.b"]))
    ff = ad.add(ad.matmul(hidden, params[f"{pre}.ffn.fc2.w"]), params[f"{pre}.ffn.fc2.b"])
    return ad.layer_norm(ad.add(u, ff), params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])


def _clamp_rows(x: Tensor, lo: np.ndarray, hi: np.ndarray) -> Tensor:
    # min(max(x, lo), hi) with per-column limits; gradient passes inside
    return ad.sub(hi, ad.relu(ad.sub(hi, ad.add(lo, ad.relu(ad.sub(x, lo))))))


def predict(queries: Tensor, params: dict, layer: int, config: HeadConfig) -> LayerOutput:
    """Boxes and class logits for one layer's refined queries.

    The regression MLP emits 9 raw values per query, decoded as: center =
    reference point + a bounded offset (saturating smoothly at
    ``offset_limit`` meters per axis, then clamped to scene bounds),
    size = exp(raw), yaw wrapped into (-pi, pi], velocity verbatim. Zero
    raw output decodes to a box centered exactly on the reference point.
    """
    pre = f"head.layer{layer}"
    ref = decode_reference(queries, params, config.bounds)

    h = ad.relu(ad.add(ad.matmul(queries, params[f"{pre}.reg.fc1.w"]), params[f"{pre}.reg.fc1.b"]))
    raw = ad.add(ad.matmul(h, params[f"{pre}.reg.fc2.w"]), params[f"{pre}.reg.fc2.b"])

    lo = np.array([b[0] for b in config.bounds])
    hi = np.array([b[1] for b in config.bounds])
    raw_offset = ad.getitem(raw, (slice(None), slice(0, 3)))
    lim = config.offset_limit
    # tanh-bounded: identity slope at zero, saturates at +-lim
    offset = ad.mul(ad.sub(ad.mul(ad.sigmoid(ad.mul(raw_offset, 2.0 / lim)), 2.0), 1.0), lim)
    center = _clamp_rows(ad.add(ref, offset), lo, hi)
    size = ad.exp(ad.clip(ad.getitem(raw, (slice(None), slice(3, 6))), -SIZE_LOG_LIMIT, SIZE_LOG_LIMIT))

    yaw_raw = ad.getitem(raw, (slice(None), slice(6, 7)))
    turns = np.floor((yaw_raw.data + np.pi) / (2.0 * np.pi))
    yaw = ad.sub(yaw_raw, 2.0 * np.pi * turns)
    at_edge = (yaw.data <= -np.pi).astype(np.float64)
    if at_edge.any():
        yaw = ad.add(yaw, 2.0 * np.pi * at_edge)

    vel = ad.getitem(raw, (slice(None), slice(7, 9)))
    boxes = ad.concat([center, size, yaw, vel], axis=1)

    hc = ad.relu(ad.add(ad.matmul(queries, params[f"{pre}.cls.fc1.w"]), params[f"{pre}.cls.fc1.b"]))
    logits = ad.add(ad.matmul(hc, params[f"{pre}.cls.fc2.w"]), params[f"{pre}.cls.fc2.b"])
    return LayerOutput(boxes=boxes, class_logits=logits, ref_points=ref.data.copy())


def forward(images, rig, params: dict, config: HeadConfig) -> list[LayerOutput]:
    """Full pass: encode once, then refine and predict at every layer.

    Returns one LayerOutput per layer; inference consumers read the last.
    """
    if not isinstance(images, Tensor):
        images = Tensor(images)
    pyramids = pyramid.encode(images, params)
    q = params["queries"]
    outputs: list[LayerOutput] = []
    for layer in range(config.num_layers):
        q = refine_layer(q, pyramids, rig, params, layer, config)
        outputs.append(predict(q, params, layer, config))
    return outputs


@dataclass
class Detector:
    """Bundle of configuration and parameters forming one model."""

    config: HeadConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    @staticmethod
    def create(config: HeadConfig, seed: int = 0) -> "Detector":
        params = pyramid.init_encoder(
            channels=config.encoder_channels, out_channels=config.hidden, seed=seed
        )
        params.update(init_head_params(config, seed + 1))
        return Detector(config=config, params=params)

    def forward(self, images, rig) -> list[LayerOutput]:
        return forward(images, rig, self.params, self.config)
