"""Dense optical flow features from onset/apex frame pairs.

The three-channel input map for the recognition network is built here:
horizontal flow u, vertical flow v (TV-L1, coarse-to-fine primal-dual) and
the optical strain magnitude derived from them.  Facial-region composites are
assembled by cropping fixed-size windows around the five landmark points and
tiling them into one map.

Image convention: row-major arrays, y = row index (downward), x = column
index (rightward).  Flow u is displacement along x, v along y, both in
pixels, pointing from the onset frame to the apex frame.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DimensionError, ValidationError

FLOW_MAGIC = b"AHMS"
FLOW_FORMAT_VERSION = 1

# Shortest pyramid side; coarser levels would carry no usable structure.
MIN_PYRAMID_SIDE = 8


@dataclass(frozen=True)
class TVL1Params:
    """Solver knobs for the primal-dual TV-L1 estimator.

    Defaults are the standard parameterization of the method (data weight
    0.15 against intensities in 0..255, coupling 0.3, dual step 0.25, five
    warps of thirty inner iterations over a half-scale pyramid).
    """

    lambda_weight: float = 0.15
    theta: float = 0.3
    tau: float = 0.25
    n_warps: int = 5
    n_inner_iters: int = 30
    pyramid_levels: int | None = None  # None = deepest pyramid allowed
    pyramid_scale: float = 0.5

    def __post_init__(self):
        problems = []
        if self.lambda_weight <= 0:
            problems.append("lambda_weight must be positive")
        if self.theta <= 0:
            problems.append("theta must be positive")
        if self.tau <= 0:
            problems.append("tau must be positive")
        if self.tau * self.theta > 0.125 + 1e-12:
            problems.append(
                f"tau*theta = {self.tau * self.theta:.4f} exceeds the dual-step "
                "stability bound 0.125"
            )
        if self.n_warps < 1 or self.n_inner_iters < 1:
            problems.append("n_warps and n_inner_iters must be positive")
        if self.pyramid_levels is not None and self.pyramid_levels < 1:
            problems.append("pyramid_levels must be positive (or None for auto)")
        if not 0.0 < self.pyramid_scale < 1.0:
            problems.append("pyramid_scale must lie in (0, 1)")
        if problems:
            raise ValidationError("; ".join(problems))


@dataclass
class FlowField:
    """Per-pixel displacement (u along x, v along y), in pixels."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise DimensionError(
                f"u {self.u.shape} and v {self.v.shape} must be equal 2-D fields"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape


@dataclass(frozen=True)
class LandmarkSet:
    """Five (x, y) pixel coordinates on the apex frame."""

    left_eye: tuple[int, int]
    right_eye: tuple[int, int]
    nose: tuple[int, int]
    left_lip: tuple[int, int]
    right_lip: tuple[int, int]

    def items(self):
        return (
            ("left_eye", self.left_eye),
            ("right_eye", self.right_eye),
            ("nose", self.nose),
            ("left_lip", self.left_lip),
            ("right_lip", self.right_lip),
        )


def _validate_gray_image(img: np.ndarray, name: str) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise DimensionError(f"{name} must be a 2-D grayscale image, got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValidationError(f"{name} contains non-finite pixels")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValidationError(f"{name} pixels must lie in [0, 1]")
    return img


# -- TV-L1 solver ------------------------------------------------------------


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize sampling at pixel centers, edge-clamped."""
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    if img.ndim == 3:
        wy = wy[:, :, None]
        wx = wx[:, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def _pyramid(img: np.ndarray, scale: float, max_levels: int | None) -> list[np.ndarray]:
    levels = [img]
    # antialias strength tied to the decimation ratio
    sigma = 0.6 * np.sqrt(1.0 / scale ** 2 - 1.0)
    while max_levels is None or len(levels) < max_levels:
        h, w = levels[-1].shape
        nh, nw = int(round(h * scale)), int(round(w * scale))
        if min(nh, nw) < MIN_PYRAMID_SIDE:
            break
        smoothed = ndimage.gaussian_filter(levels[-1], sigma, mode="nearest")
        levels.append(_resize_bilinear(smoothed, nh, nw))
    return levels


def _forward_gradient(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx = np.zeros_like(a)
    gy = np.zeros_like(a)
    gx[:, :-1] = a[:, 1:] - a[:, :-1]
    gy[:-1, :] = a[1:, :] - a[:-1, :]
    return gx, gy


def _divergence(px: np.ndarray, py: np.ndarray) -> np.ndarray:
    div = np.empty_like(px)
    div[:, 0] = px[:, 0]
    div[:, 1:] = px[:, 1:] - px[:, :-1]
    div[0, :] += py[0, :]
    div[1:, :] += py[1:, :] - py[:-1, :]
    return div


def _warp(img: np.ndarray, u: np.ndarray, v: np.ndarray,
          yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    return ndimage.map_coordinates(img, [yy + v, xx + u], order=1, mode="nearest")


def _tvl1_level(i0: np.ndarray, i1: np.ndarray, u: np.ndarray, v: np.ndarray,
                params: TVL1Params) -> tuple[np.ndarray, np.ndarray]:
    h, w = i0.shape
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    i1y, i1x = np.gradient(i1)
    p11 = np.zeros_like(i0)
    p12 = np.zeros_like(i0)
    p21 = np.zeros_like(i0)
    p22 = np.zeros_like(i0)
    l_t = params.lambda_weight * params.theta
    taut = params.tau / params.theta

    for _ in range(params.n_warps):
        i1w = _warp(i1, u, v, yy, xx)
        i1wx = _warp(i1x, u, v, yy, xx)
        i1wy = _warp(i1y, u, v, yy, xx)
        grad_sq = i1wx ** 2 + i1wy ** 2
        # residual linearized at the warp point
        rho_c = i1w - i1wx * u - i1wy * v - i0

        for _ in range(params.n_inner_iters):
            rho = rho_c + i1wx * u + i1wy * v
            # pointwise data-term proximal step
            d1 = np.where(
                rho < -l_t * grad_sq, l_t * i1wx,
                np.where(rho > l_t * grad_sq, -l_t * i1wx,
                         -rho * i1wx / np.maximum(grad_sq, 1e-12)))
            d2 = np.where(
                rho < -l_t * grad_sq, l_t * i1wy,
                np.where(rho > l_t * grad_sq, -l_t * i1wy,
                         -rho * i1wy / np.maximum(grad_sq, 1e-12)))
            v1 = u + d1
            v2 = v + d2
            # TV proximal via the dual variables
            u = v1 + params.theta * _divergence(p11, p12)
            v = v2 + params.theta * _divergence(p21, p22)
            ux, uy = _forward_gradient(u)
            vx, vy = _forward_gradient(v)
            norm1 = 1.0 + taut * np.sqrt(ux ** 2 + uy ** 2)
            norm2 = 1.0 + taut * np.sqrt(vx ** 2 + vy ** 2)
            p11 = (p11 + taut * ux) / norm1
            p12 = (p12 + taut * uy) / norm1
            p21 = (p21 + taut * vx) / norm2
            p22 = (p22 + taut * vy) / norm2

    return u, v


def tvl1_flow(onset: np.ndarray, apex: np.ndarray,
              params: TVL1Params | None = None) -> FlowField:
    """Estimate dense displacement from onset to apex by coarse-to-fine TV-L1.

    Parameters
    ----------
    onset, apex : ndarray, shape (H, W)
        Grayscale frames with intensities in [0, 1], at least 16x16.
    params : TVL1Params, optional
        Solver parameters; the defaults suit small facial displacements.

    Returns
    -------
    FlowField
        Per-pixel (u, v) in pixels.  Deterministic for fixed inputs/params.
    """
    params = params or TVL1Params()
    onset = _validate_gray_image(onset, "onset")
    apex = _validate_gray_image(apex, "apex")
    if onset.shape != apex.shape:
        raise ValidationError(
            f"onset {onset.shape} and apex {apex.shape} must have identical dims"
        )
    if min(onset.shape) < 16:
        raise ValidationError(f"images must be at least 16x16, got {onset.shape}")

    # solver operates on the classical 0..255 intensity scale that the default
    # lambda_weight is calibrated against
    pyr0 = _pyramid(onset * 255.0, params.pyramid_scale, params.pyramid_levels)
    pyr1 = _pyramid(apex * 255.0, params.pyramid_scale, params.pyramid_levels)

    u = np.zeros_like(pyr0[-1])
    v = np.zeros_like(pyr0[-1])
    for level in range(len(pyr0) - 1, -1, -1):
        i0, i1 = pyr0[level], pyr1[level]
        if u.shape != i0.shape:
            h_new, w_new = i0.shape
            h_old, w_old = u.shape
            u = _resize_bilinear(u, h_new, w_new) * (w_new / w_old)
            v = _resize_bilinear(v, h_new, w_new) * (h_new / h_old)
        u, v = _tvl1_level(i0, i1, u, v, params)
    return FlowField(u=u, v=v)


# -- optical strain ------------------------------------------------------------


def optical_strain(flow: FlowField) -> np.ndarray:
    """Strain magnitude of the flow field.

    The symmetric part of the flow Jacobian is computed with central
    differences (one-sided at borders) and reduced to its Frobenius norm
    sqrt(e_xx^2 + 2*e_xy^2 + e_yy^2); zero for any rigid translation.
    """
    h, w = flow.shape
    if h < 3 or w < 3:
        raise ValidationError(f"strain needs a field of at least 3x3, got {(h, w)}")
    du_dy, du_dx = np.gradient(flow.u)
    dv_dy, dv_dx = np.gradient(flow.v)
    e_xx = du_dx
    e_yy = dv_dy
    e_xy = 0.5 * (du_dy + dv_dx)
    return np.sqrt(e_xx ** 2 + 2.0 * e_xy ** 2 + e_yy ** 2)


# -- feature-map assembly ---------------------------------------------------------


def standardize_channels(feature_map: np.ndarray) -> np.ndarray:
    """Per-channel standardization to mean 0 / variance 1.

    A zero-variance channel maps to all-zeros instead of dividing by ~0.
    """
    out = np.empty_like(feature_map, dtype=np.float64)
    for c in range(feature_map.shape[2]):
        channel = feature_map[:, :, c]
        std = channel.std()
        if std < 1e-12:
            out[:, :, c] = 0.0
        else:
            out[:, :, c] = (channel - channel.mean()) / std
    return out


def stack_flow_channels(flow: FlowField, strain: np.ndarray) -> np.ndarray:
    """Stack (u, v, os) into one H x W x 3 map at source resolution."""
    if strain.shape != flow.shape:
        raise DimensionError(
            f"strain {strain.shape} does not match flow {flow.shape}"
        )
    return np.stack([flow.u, flow.v, strain], axis=2)


def assemble_flow_map(flow: FlowField, strain: np.ndarray,
                      out_h: int = 28, out_w: int = 28,
                      norm: str = "standardize") -> np.ndarray:
    """Resize the stacked (u, v, os) channels to the network input size.

    norm="standardize" (default) standardizes each channel per sample;
    norm="none" keeps raw values.
    """
    if norm not in ("standardize", "none"):
        raise ValidationError(f"unknown normalization {norm!r}")
    stacked = stack_flow_channels(flow, strain)
    resized = _resize_bilinear(stacked, out_h, out_w)
    if norm == "standardize":
        resized = standardize_channels(resized)
    return resized.astype(np.float64)


def compose_regions(full_map: np.ndarray, landmarks: LandmarkSet,
                    region_px: int = 28, out_size: int = 28,
                    include_nose: bool = False) -> np.ndarray:
    """Tile landmark-centered crops into one out_size x out_size x 3 composite.

    Layout: left eye | right eye on the top row, left lip | right lip on the
    bottom row, each crop resized to a quadrant.  Windows are clamped so they
    stay fully inside the source map.  With include_nose, a nose crop is
    alpha-blended (0.5) over the center.
    """
    if full_map.ndim != 3 or full_map.shape[2] != 3:
        raise DimensionError(f"full_map must be H x W x 3, got {full_map.shape}")
    if out_size % 2 != 0:
        raise ValidationError(f"out_size must be even, got {out_size}")
    h, w = full_map.shape[:2]
    if region_px < 1 or region_px > min(h, w):
        raise ValidationError(
            f"region_px={region_px} must lie in [1, {min(h, w)}] for a "
            f"{h}x{w} map"
        )

    def crop_at(name: str, point: tuple[int, int]) -> np.ndarray:
        x, y = point
        if not (0 <= x < w and 0 <= y < h):
            raise ValidationError(
                f"landmark {name} at ({x}, {y}) is outside the {h}x{w} map"
            )
        x0 = int(np.clip(x - region_px // 2, 0, w - region_px))
        y0 = int(np.clip(y - region_px // 2, 0, h - region_px))
        return full_map[y0:y0 + region_px, x0:x0 + region_px, :]

    half = out_size // 2
    tiles = {
        name: _resize_bilinear(crop_at(name, point), half, half)
        for name, point in landmarks.items()
    }
    composite = np.empty((out_size, out_size, 3), dtype=np.float64)
    composite[:half, :half] = tiles["left_eye"]
    composite[:half, half:] = tiles["right_eye"]
    composite[half:, :half] = tiles["left_lip"]
    composite[half:, half:] = tiles["right_lip"]
    if include_nose:
        start = out_size // 4
        center = composite[start:start + half, start:start + half]
        composite[start:start + half, start:start + half] = (
            0.5 * center + 0.5 * tiles["nose"]
        )
    return composite


def extract_feature_map(onset: np.ndarray, apex: np.ndarray,
                        landmarks: LandmarkSet | None = None,
                        tvl1_params: TVL1Params | None = None,
                        region_px: int = 28, out_size: int = 28,
                        include_nose: bool = False,
                        norm: str = "standardize") -> np.ndarray:
    """Full per-sample pipeline: flow, strain, region composite, normalization.

    Without landmarks the whole-frame map is resized instead of composited.
    """
    flow = tvl1_flow(onset, apex, tvl1_params)
    strain = optical_strain(flow)
    if landmarks is None:
        return assemble_flow_map(flow, strain, out_size, out_size, norm=norm)
    full = stack_flow_channels(flow, strain)
    composite = compose_regions(full, landmarks, region_px=region_px,
                                out_size=out_size, include_nose=include_nose)
    if norm == "standardize":
        composite = standardize_channels(composite)
    elif norm != "none":
        raise ValidationError(f"unknown normalization {norm!r}")
    return composite


# -- file formats -----------------------------------------------------------------


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit binary PGM (P5) into floats in [0, 1]."""
    data = Path(path).read_bytes()

    tokens = []
    i = 0
    while len(tokens) < 4:
        if i >= len(data):
            raise ValidationError(f"{path}: truncated PGM header")
        ch = data[i:i + 1]
        if ch == b"#":
            while i < len(data) and data[i:i + 1] != b"\n":
                i += 1
        elif ch.isspace():
            i += 1
        else:
            start = i
            while i < len(data) and not data[i:i + 1].isspace():
                i += 1
            tokens.append(data[start:i])
    i += 1  # single whitespace after maxval

    if tokens[0] != b"P5":
        raise ValidationError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValidationError(f"{path}: only 8-bit PGM supported, maxval={maxval}")
    pixels = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=i)
    if pixels.size != width * height:
        raise ValidationError(f"{path}: truncated pixel data")
    return pixels.reshape(height, width).astype(np.float64) / 255.0


def write_pgm(path, img: np.ndarray) -> None:
    """Write floats in [0, 1] as an 8-bit binary PGM."""
    img = _validate_gray_image(img, "image")
    h, w = img.shape
    quantized = np.round(img * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(quantized.tobytes())


def write_flow_map(path, feature_map: np.ndarray) -> None:
    """Serialize an H x W x 3 feature map (16-byte header + f32 LE payload)."""
    if feature_map.ndim != 3 or feature_map.shape[2] != 3:
        raise DimensionError(f"feature map must be H x W x 3, got {feature_map.shape}")
    h, w = feature_map.shape[:2]
    if h < 1 or w < 1:
        raise DimensionError(f"feature map dims must be positive, got {h}x{w}")
    with open(path, "wb") as f:
        f.write(FLOW_MAGIC)
        f.write(struct.pack("<B3x", FLOW_FORMAT_VERSION))
        f.write(struct.pack("<II", h, w))
        f.write(np.ascontiguousarray(feature_map, dtype="<f4").tobytes())


def read_flow_map(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise ValidationError(f"{path}: shorter than the 16-byte header")
    if data[:4] != FLOW_MAGIC:
        raise ValidationError(f"{path}: bad magic {data[:4]!r}")
    version = data[4]
    if version != FLOW_FORMAT_VERSION:
        raise ValidationError(f"{path}: unsupported format version {version}")
    h, w = struct.unpack_from("<II", data, 8)
    if h < 1 or w < 1:
        raise ValidationError(f"{path}: non-positive dims {h}x{w} in header")
    expected = 16 + h * w * 3 * 4
    if len(data) != expected:
        raise ValidationError(
            f"{path}: payload is {len(data) - 16} bytes, expected {expected - 16}"
        )
    flat = np.frombuffer(data, dtype="<f4", count=h * w * 3, offset=16)
    return flat.reshape(h, w, 3).astype(np.float32)
