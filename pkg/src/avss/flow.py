"""Dense two-frame optical flow by polynomial expansion (Farneback-style).

Each pixel neighborhood is fit with a quadratic f(z) ~ z'Az + b'z + c under a
separable Gaussian weight; displacement follows from how the linear
coefficients shift between frames.  A coarse-to-fine pyramid with box-filtered
normal equations handles motions larger than a neighborhood.

Component order is (x, y): x along columns (axis 1), y along rows (axis 0).
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ShapeMismatch

# taper applied to equation weights near image borders (5 px ramp)
_BORDER_TAPER = np.array([0.14, 0.14, 0.4472, 0.4472, 0.4472])


@dataclass
class FrameSequence:
    """Stack of grayscale frames (N, H, W) with intensities in [0, 1]."""

    frames: np.ndarray
    frame_rate: float = 25.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3:
            raise ShapeMismatch(f"frames must be (N, H, W), got {self.frames.shape}")
        if self.frame_rate <= 0:
            raise ConfigError(f"frame rate must be positive, got {self.frame_rate}")

    def __len__(self):
        return self.frames.shape[0]

    @property
    def frame_shape(self):
        return self.frames.shape[1:]


@dataclass
class FlowField:
    """Per-pixel displacement in pixels per frame interval."""

    dx: np.ndarray
    dy: np.ndarray

    def __post_init__(self):
        self.dx = np.asarray(self.dx, dtype=np.float64)
        self.dy = np.asarray(self.dy, dtype=np.float64)
        if self.dx.shape != self.dy.shape or self.dx.ndim != 2:
            raise ShapeMismatch(
                f"dx {self.dx.shape} and dy {self.dy.shape} must be equal 2-d grids"
            )

    @property
    def shape(self):
        return self.dx.shape


@dataclass(frozen=True)
class FlowParams:
    pyramid_levels: int = 3
    pyramid_scale: float = 0.5
    window_size: int = 13
    iterations: int = 3
    poly_n: int = 5
    poly_sigma: float = 1.1

    def __post_init__(self):
        if self.pyramid_levels < 1:
            raise ConfigError("pyramid_levels must be >= 1")
        if not 0.0 < self.pyramid_scale < 1.0:
            raise ConfigError("pyramid_scale must lie in (0, 1)")
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise ConfigError("window_size must be odd and positive")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.poly_n < 3 or self.poly_n % 2 == 0:
            raise ConfigError("poly_n must be odd and >= 3")
        if self.poly_sigma <= 0:
            raise ConfigError("poly_sigma must be positive")


# ---------------------------------------------------------------------------
# polynomial expansion
# ---------------------------------------------------------------------------


def _expansion_kernels(poly_n, poly_sigma):
    half = poly_n // 2
    t = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-t * t / (2.0 * poly_sigma * poly_sigma))
    g /= g.sum()
    return t, g


def _dual_basis(poly_n, poly_sigma):
    """Inverse of the weighted Gram matrix for basis (1, x, y, x^2, y^2, xy)."""
    t, g = _expansion_kernels(poly_n, poly_sigma)
    xx, yy = np.meshgrid(t, t)
    weight = np.outer(g, g).reshape(-1)
    basis = np.stack(
        [np.ones_like(xx), xx, yy, xx * xx, yy * yy, xx * yy], axis=-1
    ).reshape(-1, 6)
    gram = basis.T @ (basis * weight[:, None])
    return np.linalg.inv(gram)


def polynomial_expansion(img, poly_n=5, poly_sigma=1.1):
    """Per-pixel quadratic coefficients (A, b, c) of the local signal model.

    Returns A (H, W, 2, 2) symmetric, b (H, W, 2), c (H, W).  Borders use
    replicated edges; accuracy claims hold on the interior.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeMismatch(f"expected a grayscale image, got shape {img.shape}")
    if min(img.shape) < poly_n:
        raise ShapeMismatch(
            f"image {img.shape} smaller than the {poly_n}-pixel neighborhood"
        )
    t, g = _expansion_kernels(poly_n, poly_sigma)
    tg = t * g
    ttg = t * t * g

    corr = lambda a, k, axis: ndimage.correlate1d(a, k, axis=axis, mode="nearest")
    v0 = corr(img, g, 0)   # sum_y g(y) f
    v1 = corr(img, tg, 0)  # sum_y y g(y) f
    v2 = corr(img, ttg, 0)

    m = np.empty((6,) + img.shape)
    m[0] = corr(v0, g, 1)    # 1
    m[1] = corr(v0, tg, 1)   # x
    m[2] = corr(v1, g, 1)    # y
    m[3] = corr(v0, ttg, 1)  # x^2
    m[4] = corr(v2, g, 1)    # y^2
    m[5] = corr(v1, tg, 1)   # xy

    r = np.tensordot(_dual_basis(poly_n, poly_sigma), m, axes=(1, 0))
    c = r[0]
    b = np.stack([r[1], r[2]], axis=-1)
    a = np.empty(img.shape + (2, 2))
    a[..., 0, 0] = r[3]
    a[..., 1, 1] = r[4]
    a[..., 0, 1] = a[..., 1, 0] = 0.5 * r[5]
    return a, b, c


# ---------------------------------------------------------------------------
# displacement estimation
# ---------------------------------------------------------------------------


def _resize_bilinear(img, shape):
    h, w = shape
    ys = (np.arange(h) + 0.5) * (img.shape[0] / h) - 0.5
    xs = (np.arange(w) + 0.5) * (img.shape[1] / w) - 0.5
    grid = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(img, grid, order=1, mode="nearest")


def _downscale(img, shape, scale):
    sigma = (1.0 / scale - 1.0) * 0.5
    smooth = ndimage.gaussian_filter(img, sigma, mode="nearest") if sigma > 0 else img
    return _resize_bilinear(smooth, shape)


def _border_weight(shape):
    h, w = shape
    ramp_y = np.ones(h)
    ramp_x = np.ones(w)
    k = min(len(_BORDER_TAPER), h // 2)
    ramp_y[:k] = _BORDER_TAPER[:k]
    ramp_y[h - k :] = _BORDER_TAPER[:k][::-1]
    k = min(len(_BORDER_TAPER), w // 2)
    ramp_x[:k] = _BORDER_TAPER[:k]
    ramp_x[w - k :] = _BORDER_TAPER[:k][::-1]
    return np.outer(ramp_y, ramp_x)


def _update_matrices(exp_prev, exp_next, flow, border):
    """Pointwise normal-equation pieces G = A'A, h = A'db for the current flow."""
    a_prev, b_prev, _ = exp_prev
    a_next, b_next, _ = exp_next
    h, w = flow.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    fx = xs + flow[..., 0]
    fy = ys + flow[..., 1]
    valid = (fx >= 0) & (fx <= w - 1) & (fy >= 0) & (fy <= h - 1)
    coords = [np.clip(fy, 0, h - 1), np.clip(fx, 0, w - 1)]

    def sample(plane):
        return ndimage.map_coordinates(plane, coords, order=1, mode="nearest")

    a_warp = np.empty_like(a_next)
    for i in range(2):
        for j in range(2):
            a_warp[..., i, j] = sample(a_next[..., i, j])
    b_warp = np.stack([sample(b_next[..., 0]), sample(b_next[..., 1])], axis=-1)

    a_mean = 0.5 * (a_prev + a_warp)
    db = -0.5 * (b_warp - b_prev)
    db += np.einsum("hwij,hwj->hwi", a_mean, flow)

    weight = np.where(valid, 1.0, 0.0) * border
    axx = a_mean[..., 0, 0] * weight
    axy = a_mean[..., 0, 1] * weight
    ayy = a_mean[..., 1, 1] * weight
    dbx = db[..., 0] * weight
    dby = db[..., 1] * weight

    return np.stack(
        [
            axx * axx + axy * axy,          # G11
            axy * (axx + ayy),              # G12
            ayy * ayy + axy * axy,          # G22
            axx * dbx + axy * dby,          # h1
            axy * dbx + ayy * dby,          # h2
        ],
        axis=0,
    )


def _solve_flow(m, window_size):
    g11, g12, g22, h1, h2 = (
        ndimage.uniform_filter(m[i], size=window_size, mode="nearest")
        for i in range(5)
    )
    det = g11 * g22 - g12 * g12 + 1e-3
    return np.stack([(g22 * h1 - g12 * h2) / det, (g11 * h2 - g12 * h1) / det], axis=-1)


def _effective_levels(shape, params):
    levels = 1
    size = min(shape)
    while (
        levels < params.pyramid_levels
        and round(size * params.pyramid_scale**levels) >= params.poly_n
    ):
        levels += 1
    return levels


def estimate_flow_pair(prev, nxt, params=FlowParams(), init=None):
    """Dense flow from `prev` to `nxt`, optionally warm-started by `init`.

    Pyramid depth is clamped so the coarsest level stays at least poly_n wide.
    """
    prev = np.asarray(prev, dtype=np.float64)
    nxt = np.asarray(nxt, dtype=np.float64)
    if prev.shape != nxt.shape:
        raise ShapeMismatch(f"frame shapes differ: {prev.shape} vs {nxt.shape}")
    if prev.ndim != 2 or min(prev.shape) < params.poly_n:
        raise ShapeMismatch(f"frames {prev.shape} too small for poly_n={params.poly_n}")
    # work in the 8-bit intensity range so the solver regularization is
    # calibrated the same way regardless of the [0,1] input scale
    prev = prev * 255.0
    nxt = nxt * 255.0

    levels = _effective_levels(prev.shape, params)
    shapes = []
    for k in range(levels):
        s = params.pyramid_scale**k
        shapes.append((max(round(prev.shape[0] * s), 1), max(round(prev.shape[1] * s), 1)))

    flow = None
    for k in reversed(range(levels)):
        shape = shapes[k]
        scale = params.pyramid_scale**k
        if k == 0:
            im0, im1 = prev, nxt
        else:
            im0 = _downscale(prev, shape, scale)
            im1 = _downscale(nxt, shape, scale)

        if flow is None:
            if init is not None:
                flow = np.zeros(shape + (2,))
                flow[..., 0] = _resize_bilinear(init.dx, shape) * (shape[1] / prev.shape[1])
                flow[..., 1] = _resize_bilinear(init.dy, shape) * (shape[0] / prev.shape[0])
            else:
                flow = np.zeros(shape + (2,))
        else:
            prev_shape = flow.shape[:2]
            up = np.zeros(shape + (2,))
            up[..., 0] = _resize_bilinear(flow[..., 0], shape) * (shape[1] / prev_shape[1])
            up[..., 1] = _resize_bilinear(flow[..., 1], shape) * (shape[0] / prev_shape[0])
            flow = up

        exp0 = polynomial_expansion(im0, params.poly_n, params.poly_sigma)
        exp1 = polynomial_expansion(im1, params.poly_n, params.poly_sigma)
        border = _border_weight(shape)
        m = _update_matrices(exp0, exp1, flow, border)
        for i in range(params.iterations):
            flow = _solve_flow(m, params.window_size)
            if i + 1 < params.iterations:
                m = _update_matrices(exp0, exp1, flow, border)

    return FlowField(dx=flow[..., 0], dy=flow[..., 1])


def flow_sequence(seq: FrameSequence, params=FlowParams()):
    """Flows for all consecutive frame pairs, each warm-started by its predecessor."""
    if len(seq) < 2:
        raise ShapeMismatch(f"need at least 2 frames for flow, got {len(seq)}")
    fields = []
    previous = None
    for i in range(len(seq) - 1):
        field = estimate_flow_pair(seq.frames[i], seq.frames[i + 1], params, init=previous)
        fields.append(field)
        previous = field
    return fields


def flow_stack(fields):
    """Stack a list of FlowFields into (N-1, 2, H, W) with channels (dx, dy)."""
    return np.stack([np.stack([f.dx, f.dy], axis=0) for f in fields], axis=0)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

FRAMES_MAGIC = b"AVSSFRM"
FLOW_MAGIC = b"AVSSFLW"


def write_pgm(path, img):
    """8-bit binary PGM (P5); values expected in [0, 1]."""
    data = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    match = re.match(rb"P5\s+(?:#.*\s+)*(\d+)\s+(\d+)\s+(\d+)\s", blob)
    if not match:
        raise ConfigError(f"{path}: not a binary PGM (P5) file")
    width, height, maxval = (int(match.group(i)) for i in (1, 2, 3))
    if maxval != 255:
        raise ConfigError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    pixels = np.frombuffer(blob, dtype=np.uint8, count=width * height, offset=match.end())
    return pixels.reshape(height, width).astype(np.float64) / 255.0


def write_frames(path, seq: FrameSequence):
    """Packed frame container: magic, u32 N/H/W, f32 fps, then N*H*W bytes."""
    n, h, w = seq.frames.shape
    data = np.clip(np.round(seq.frames * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(FRAMES_MAGIC)
        fh.write(struct.pack("<IIIf", n, h, w, float(seq.frame_rate)))
        fh.write(data.tobytes())


def read_frames(path) -> FrameSequence:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(FRAMES_MAGIC)] != FRAMES_MAGIC:
        raise ConfigError(f"{path}: bad frame container magic")
    n, h, w, fps = struct.unpack_from("<IIIf", blob, len(FRAMES_MAGIC))
    pixels = np.frombuffer(blob, dtype=np.uint8, count=n * h * w,
                           offset=len(FRAMES_MAGIC) + 16)
    return FrameSequence(pixels.reshape(n, h, w).astype(np.float64) / 255.0, fps)


def load_frames(path) -> FrameSequence:
    """Frames from an AVSSFRM file or a directory of PGMs (lexicographic)."""
    import os

    if os.path.isdir(path):
        names = sorted(f for f in os.listdir(path) if f.endswith(".pgm"))
        if not names:
            raise ConfigError(f"{path}: no .pgm files found")
        frames = np.stack([read_pgm(os.path.join(path, n)) for n in names])
        return FrameSequence(frames)
    return read_frames(path)


def write_flow(path, fields):
    """Flow container: magic, u32 steps/H/W, then f32 dx,dy planes per step."""
    fields = list(fields)
    h, w = fields[0].shape
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC)
        fh.write(struct.pack("<III", len(fields), h, w))
        for f in fields:
            fh.write(f.dx.astype("<f4").tobytes())
            fh.write(f.dy.astype("<f4").tobytes())


def read_flow(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(FLOW_MAGIC)] != FLOW_MAGIC:
        raise ConfigError(f"{path}: bad flow container magic")
    steps, h, w = struct.unpack_from("<III", blob, len(FLOW_MAGIC))
    offset = len(FLOW_MAGIC) + 12
    plane = h * w
    fields = []
    for _ in range(steps):
        dx = np.frombuffer(blob, dtype="<f4", count=plane, offset=offset).reshape(h, w)
        offset += 4 * plane
        dy = np.frombuffer(blob, dtype="<f4", count=plane, offset=offset).reshape(h, w)
        offset += 4 * plane
        fields.append(FlowField(dx.astype(np.float64), dy.astype(np.float64)))
    return fields
