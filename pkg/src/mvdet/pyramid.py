"""Multi-scale image features and differentiable bilinear sampling.

The encoder is a small strided convolutional net: a stem of three 3x3
stride-2 convolutions (with relu) brings the image to 1/8 resolution;
each pyramid level is then read off through a stride-1 3x3 convolution
(widening the receptive field where it matters most), with stride-2
convolutions between levels. The result is four feature levels at 1/8,
1/16, 1/32 and 1/64 of the input size, all with the same channel count.

Feature maps are stored channels-last. ``encode`` takes all cameras
stacked along a leading axis so every convolution is one matmul.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NUM_LEVELS = 4

# stem of three stride-2 convs, then per level a stride-1 read-off conv
# (levels tap after it) with stride-2 transitions in between
_CONV_STRIDES = (2, 2, 2, 1, 2, 1, 2, 1, 2, 1)
_LEVEL_TAPS = (3, 5, 7, 9)
_NUM_CONVS = len(_CONV_STRIDES)

# incremented whenever bilinear_sample receives out-of-range coordinates
# (expected never when callers gate by visibility; kept for diagnostics)
clamp_events = 0


def _conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """3x3 convolution with 1-pixel zero padding, channels-last.

    Returns (patches, out) where patches is the (B*oh*ow, 9*Cin) im2col
    matrix kept for the backward pass.
    """
    b, h, wdt, cin = x.shape
    oh, ow = (h + stride - 1) // stride, (wdt + stride - 1) // stride
    padded = np.zeros((b, h + 2, wdt + 2, cin))
    padded[:, 1 : h + 1, 1 : wdt + 1, :] = x
    patches = np.empty((b, oh, ow, 3, 3, cin))
    for di in range(3):
        for dj in range(3):
            patches[:, :, :, di, dj, :] = padded[
                :, di : di + stride * oh : stride, dj : dj + stride * ow : stride, :
            ]
    flat = patches.reshape(b * oh * ow, 9 * cin)
    out = (flat @ w.reshape(9 * cin, -1)).reshape(b, oh, ow, -1)
    return flat, out


def _conv2d_bwd(node, g):
    x, w, bias = node.inputs
    flat = node.saved["patches"]
    stride = node.saved["stride"]
    b, h, wdt, cin = x.data.shape
    oh, ow = (h + stride - 1) // stride, (wdt + stride - 1) // stride
    cout = g.shape[-1]
    gflat = g.reshape(b * oh * ow, cout)
    gw = (flat.T @ gflat).reshape(w.data.shape)
    gb = gflat.sum(axis=0)
    gx = None
    if x.requires_grad:
        gpatch = (gflat @ w.data.reshape(9 * cin, cout).T).reshape(b, oh, ow, 3, 3, cin)
        gpad = np.zeros((b, h + 2, wdt + 2, cin))
        for di in range(3):
            for dj in range(3):
                gpad[:, di : di + stride * oh : stride, dj : dj + stride * ow : stride, :] += gpatch[
                    :, :, :, di, dj, :
                ]
        gx = gpad[:, 1 : h + 1, 1 : wdt + 1, :]
    return gx, gw, gb


ad.register_op("conv2d", _conv2d_bwd)


def conv2d(x: Tensor, w: Tensor, bias: Tensor, stride: int = 2) -> Tensor:
    """Recorded 3x3/pad-1 convolution on (B, H, W, Cin) input."""
    patches, out = _conv2d_forward(x.data, w.data, stride)
    out = out + bias.data
    return ad.record_op("conv2d", out, (x, w, bias), {"patches": patches, "stride": stride})


def conv2d_s2(x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    return conv2d(x, w, bias, stride=2)


def init_encoder(
    channels: int = 32,
    out_channels: int | None = None,
    in_channels: int = 3,
    seed: int = 0,
    prefix: str = "enc",
) -> dict[str, Tensor]:
    """Glorot-initialized parameters for the 6-convolution encoder.

    When ``out_channels`` differs from the trunk width, each pyramid
    level gets a 1x1 lateral projection to the requested output width.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    cin = in_channels
    for i in range(_NUM_CONVS):
        cout = channels
        # He noise plus an identity center tap: at initialization every level
        # is close to a smoothed, downsampled copy of its input, so color and
        # spatial layout are linearly readable by the head from the start
        std = np.sqrt(2.0 / (9 * cin))
        w = rng.normal(0.0, std, size=(3, 3, cin, cout)) * 0.25
        eye = min(cin, cout)
        w[1, 1, :eye, :eye] += np.eye(eye)
        params[f"{prefix}.conv{i}.w"] = ad.parameter(w)
        params[f"{prefix}.conv{i}.b"] = ad.parameter(np.zeros(cout))
        cin = cout
    if out_channels is not None and out_channels != channels:
        for k in range(NUM_LEVELS):
            lat = _glorot_matrix(rng, channels, out_channels) * 0.25
            eye = min(channels, out_channels)
            lat[:eye, :eye] += np.eye(eye)
            params[f"{prefix}.lat{k}.w"] = ad.parameter(lat)
            params[f"{prefix}.lat{k}.b"] = ad.parameter(np.zeros(out_channels))
    return params


def _glorot_matrix(rng, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def encode(images: Tensor, params: dict[str, Tensor], prefix: str = "enc") -> list[Tensor]:
    """Per-camera feature pyramids for stacked input images (K, H, W, 3).

    Returns the 4 levels as (K, h_k, w_k, C) tensors with spatial sizes
    1/8, 1/16, 1/32 and 1/64 of the input (the deeper levels halve with
    ceiling division). Input height and width must be divisible by 8 so
    the first level is exact.
    """
    k, h, w, _ = images.data.shape
    if h % 8 != 0 or w % 8 != 0:
        raise ValueError(f"image size {h}x{w} not divisible by 8")
    x = images
    levels: list[Tensor] = []
    for i, stride in enumerate(_CONV_STRIDES):
        x = ad.relu(
            conv2d(x, params[f"{prefix}.conv{i}.w"], params[f"{prefix}.conv{i}.b"], stride)
        )
        if i in _LEVEL_TAPS:
            levels.append(x)
    if f"{prefix}.lat0.w" in params:
        projected = []
        for idx, level in enumerate(levels):
            kk, hh, ww, cc = level.data.shape
            flat = ad.reshape(level, (kk * hh * ww, cc))
            flat = ad.add(ad.matmul(flat, params[f"{prefix}.lat{idx}.w"]), params[f"{prefix}.lat{idx}.b"])
            projected.append(ad.reshape(flat, (kk, hh, ww, flat.data.shape[-1])))
        levels = projected
    return levels


def _bilinear_pieces(fm: np.ndarray, uv: np.ndarray):
    h, w, _ = fm.shape
    half = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    grid = (uv + 1.0) * half
    i0 = np.clip(np.floor(grid[:, 0]), 0, max(w - 2, 0)).astype(np.intp)
    j0 = np.clip(np.floor(grid[:, 1]), 0, max(h - 2, 0)).astype(np.intp)
    i1 = np.minimum(i0 + 1, w - 1)
    j1 = np.minimum(j0 + 1, h - 1)
    du = (grid[:, 0] - i0)[:, None]
    dv = (grid[:, 1] - j0)[:, None]
    flat = fm.reshape(h * w, -1)
    corners = (flat[j0 * w + i0], flat[j0 * w + i1], flat[j1 * w + i0], flat[j1 * w + i1])
    indices = (j0 * w + i0, j0 * w + i1, j1 * w + i0, j1 * w + i1)
    return half, du, dv, corners, indices


def _bilinear_bwd(node, g):
    fm, uv = node.inputs
    half = node.saved["half"]
    du, dv = node.saved["du"], node.saved["dv"]
    g00, g10, g01, g11 = node.saved["corners"]
    idx00, idx10, idx01, idx11 = node.saved["indices"]
    inside = node.saved["inside"]

    gfm = None
    if fm.requires_grad:
        h, w, c = fm.data.shape
        gflat = np.zeros((h * w, c))
        np.add.at(gflat, idx00, g * ((1.0 - du) * (1.0 - dv)))
        np.add.at(gflat, idx10, g * (du * (1.0 - dv)))
        np.add.at(gflat, idx01, g * ((1.0 - du) * dv))
        np.add.at(gflat, idx11, g * (du * dv))
        gfm = gflat.reshape(fm.data.shape)

    guv = None
    if uv.requires_grad:
        ddu = ((g10 - g00) * (1.0 - dv) + (g11 - g01) * dv) * g
        ddv = ((g01 - g00) * (1.0 - du) + (g11 - g10) * du) * g
        guv = np.stack(
            [ddu.sum(axis=1) * half[0], ddv.sum(axis=1) * half[1]], axis=1
        )
        guv *= inside
    return gfm, guv


ad.register_op("bilinear", _bilinear_bwd)


def bilinear_sample(fm: Tensor, uv_norm: Tensor) -> Tensor:
    """Sample a (H, W, C) feature map at (M, 2) normalized coordinates.

    Align-corners convention: u = -1 maps to the center of column 0 and
    u = +1 to the center of column W-1 (likewise v over rows). The result
    is the bilinear mix of the 4 surrounding cells, differentiable in
    both the map values and the coordinates. Out-of-range coordinates are
    clamped to the border (their coordinate gradient is zero) and counted
    in ``clamp_events``.
    """
    global clamp_events
    uv = uv_norm.data
    inside = (np.abs(uv) <= 1.0).astype(np.float64)
    if np.any(inside == 0.0):
        clamp_events += 1
        uv = np.clip(uv, -1.0, 1.0)
    half, du, dv, corners, indices = _bilinear_pieces(fm.data, uv)
    g00, g10, g01, g11 = corners
    out = (
        g00 * ((1.0 - du) * (1.0 - dv))
        + g10 * (du * (1.0 - dv))
        + g01 * ((1.0 - du) * dv)
        + g11 * (du * dv)
    )
    return ad.record_op(
        "bilinear",
        out,
        (fm, uv_norm),
        {
            "half": half,
            "du": du,
            "dv": dv,
            "corners": corners,
            "indices": indices,
            "inside": inside,
        },
    )
