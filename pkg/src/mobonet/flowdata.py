"""Warping, ground-truth boundaries from flow, augmentation and synthetic data.

Arrays follow the conventions of :mod:`mobonet.flowio`: frames are (H, W, 3)
in [0, 1], flows are float32 (H, W, 2) holding (u, v).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from scipy import ndimage

from .tensor import ShapeError

DEFAULT_GT_THRESHOLD = 0.5
GT_THRESHOLDS = (0.5, 1.0, 2.0)


@dataclass
class Sample:
    frame1: np.ndarray
    frame2: np.ndarray
    fwd_flow: np.ndarray
    bwd_flow: np.ndarray
    fwd_warp_error: np.ndarray
    bwd_warp_error: np.ndarray
    gt_flow: np.ndarray
    gt_boundary: np.ndarray

    @property
    def height(self) -> int:
        return self.frame1.shape[0]

    @property
    def width(self) -> int:
        return self.frame1.shape[1]


def _check_extents(*arrays):
    hw = arrays[0].shape[:2]
    for a in arrays[1:]:
        if a.shape[:2] != hw:
            raise ShapeError(f"extent mismatch: {a.shape[:2]} vs {hw}")


def bilinear_sample(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample ``img`` at real coordinates; coordinates are clamped to the border."""
    h, w = img.shape[:2]
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.intp), w - 2) if w > 1 else np.zeros(x.shape, np.intp)
    y0 = np.minimum(np.floor(y).astype(np.intp), h - 2) if h > 1 else np.zeros(y.shape, np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = x - x0
    ay = y - y0
    if img.ndim == 3:
        ax, ay = ax[..., None], ay[..., None]
    top = img[y0, x0] * (1 - ax) + img[y0, x1] * ax
    bot = img[y1, x0] * (1 - ax) + img[y1, x1] * ax
    return top * (1 - ay) + bot * ay


def backward_warp(frame2: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """out(x, y) = frame2 sampled bilinearly at (x + u, y + v)."""
    _check_extents(frame2, flow)
    h, w = flow.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    out = bilinear_sample(frame2.astype(np.float64), xs + flow[..., 0], ys + flow[..., 1])
    return out.astype(frame2.dtype)


def warping_error(frame1: np.ndarray, frame2: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Per-pixel Euclidean RGB distance between frame1 and the warped frame2."""
    _check_extents(frame1, frame2, flow)
    diff = frame1.astype(np.float64) - backward_warp(frame2, flow).astype(np.float64)
    return np.sqrt((diff * diff).sum(axis=-1)).astype(frame1.dtype)


def flow_gradient_magnitude(flow: np.ndarray) -> np.ndarray:
    """sqrt(|grad u|^2 + |grad v|^2) with central differences and replicate borders."""
    f = np.asarray(flow, dtype=np.float64)
    p = np.pad(f, ((1, 1), (1, 1), (0, 0)), mode="edge")
    gx = (p[1:-1, 2:] - p[1:-1, :-2]) / 2.0
    gy = (p[2:, 1:-1] - p[:-2, 1:-1]) / 2.0
    return np.sqrt((gx * gx).sum(-1) + (gy * gy).sum(-1))


def gt_boundaries_from_flow(flow: np.ndarray, threshold: float = DEFAULT_GT_THRESHOLD) -> np.ndarray:
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    return (flow_gradient_magnitude(flow) > threshold).astype(np.uint8)


# --- augmentation -------------------------------------------------------------

AUGMENT_RANGES = {
    "translation": (-0.15, 0.15),
    "rotation": (-20.0, 20.0),
    "scale": (0.8, 1.8),
    "noise_sigma": (0.0, 0.05),
    "color": (0.8, 1.6),
    "contrast": (0.8, 1.6),
    "gamma": (0.6, 1.6),
}
BRIGHTNESS_SIGMA = 0.15


@dataclass
class AugmentParams:
    translation: Tuple[float, float] = (0.0, 0.0)  # fraction of image width
    rotation: float = 0.0  # degrees
    scale: float = 1.0
    noise_sigma: float = 0.0
    color: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    contrast: float = 1.0
    gamma: float = 1.0
    brightness: float = 0.0

    def validate(self) -> None:
        def within(name, v):
            lo, hi = AUGMENT_RANGES[name]
            if not lo <= v <= hi:
                raise ValueError(f"{name}={v} outside [{lo}, {hi}]")

        for t in self.translation:
            within("translation", t)
        within("rotation", self.rotation)
        within("scale", self.scale)
        within("noise_sigma", self.noise_sigma)
        for c in self.color:
            within("color", c)
        within("contrast", self.contrast)
        within("gamma", self.gamma)
        if not np.isfinite(self.brightness):
            raise ValueError("brightness must be finite")


def sample_augment_params(rng: np.random.Generator) -> AugmentParams:
    u = lambda name: float(rng.uniform(*AUGMENT_RANGES[name]))  # noqa: E731
    return AugmentParams(
        translation=(u("translation"), u("translation")),
        rotation=u("rotation"),
        scale=u("scale"),
        noise_sigma=u("noise_sigma"),
        color=(u("color"), u("color"), u("color")),
        contrast=u("contrast"),
        gamma=u("gamma"),
        brightness=float(rng.normal(0.0, BRIGHTNESS_SIGMA)),
    )


def similarity_matrix(rotation_deg: float, scale: float) -> np.ndarray:
    """2x2 map acting on (x, y) pixel vectors; positive angles turn +x toward +y."""
    t = np.deg2rad(rotation_deg)
    c, s = np.cos(t), np.sin(t)
    return scale * np.array([[c, -s], [s, c]])


def _source_coords(h, w, params: AugmentParams):
    a = similarity_matrix(params.rotation, params.scale)
    ainv = np.linalg.inv(a) if (params.rotation or params.scale != 1.0) else np.eye(2)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    tx, ty = params.translation[0] * w, params.translation[1] * w
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xs - cx - tx, ys - cy - ty
    sx = ainv[0, 0] * dx + ainv[0, 1] * dy + cx
    sy = ainv[1, 0] * dx + ainv[1, 1] * dy + cy
    return a, sx, sy


def _nearest(img, sx, sy):
    h, w = img.shape[:2]
    xi = np.clip(np.floor(sx + 0.5).astype(np.intp), 0, w - 1)
    yi = np.clip(np.floor(sy + 0.5).astype(np.intp), 0, h - 1)
    return img[yi, xi]


def _photometric(img, params: AugmentParams, rng):
    x = img.astype(np.float64) * np.asarray(params.color)
    if params.contrast != 1.0:
        m = x.mean()
        x = (x - m) * params.contrast + m
    x = np.clip(x, 0.0, 1.0) ** params.gamma
    x = x + params.brightness
    if params.noise_sigma > 0:
        x = x + rng.normal(0.0, params.noise_sigma, x.shape)
    return np.clip(x, 0.0, 1.0).astype(img.dtype)


def augment(sample: Sample, params: AugmentParams, rng: np.random.Generator, strict: bool = True) -> Sample:
    """Apply one similarity transform to frames, flows and boundary, then photometric changes to frames.

    Flow vectors are multiplied by the similarity's linear part; flows and the
    boundary mask are resampled nearest-neighbour so discontinuities stay sharp
    and the mask stays binary. Warp errors are recomputed from the transformed
    frames and flows. The output is cropped to a multiple of 16 in each extent.
    ``strict=False`` skips the training-range check (the geometry works for any
    angle or scale).
    """
    if strict:
        params.validate()
    h, w = sample.height, sample.width
    a, sx, sy = _source_coords(h, w, params)
    geom_frames = [bilinear_sample(f.astype(np.float64), sx, sy).astype(f.dtype) for f in (sample.frame1, sample.frame2)]

    def flow_t(f):
        g = _nearest(f.astype(np.float64), sx, sy)
        return (g @ a.T).astype(f.dtype)

    fwd, bwd, gt = (flow_t(f) for f in (sample.fwd_flow, sample.bwd_flow, sample.gt_flow))
    boundary = _nearest(sample.gt_boundary, sx, sy)
    f1, f2 = (_photometric(f, params, rng) for f in geom_frames)
    h16, w16 = h - h % 16, w - w % 16
    crop = lambda x: x[:h16, :w16]  # noqa: E731
    f1, f2, fwd, bwd, gt, boundary = map(crop, (f1, f2, fwd, bwd, gt, boundary))
    return Sample(
        frame1=f1,
        frame2=f2,
        fwd_flow=fwd,
        bwd_flow=bwd,
        fwd_warp_error=warping_error(f1, f2, fwd),
        bwd_warp_error=warping_error(f2, f1, bwd),
        gt_flow=gt,
        gt_boundary=boundary,
    )


# --- synthetic scenes -----------------------------------------------------------


@dataclass
class SynthConfig:
    width: int = 64
    height: int = 64
    flow_noise: float = 0.5  # std of additive Gaussian noise on the initial flows, px
    flow_smoothing: float = 0.0  # Gaussian blur sigma applied to the initial flows, px
    max_shapes: int = 3
    max_translation: float = 3.0
    min_relative_motion: float = 2.0
    max_rotation: float = 2.0  # degrees, per shape


@dataclass
class _Layer:
    texture: np.ndarray  # coarse control grid (gh, gw, 3)
    spacing: float
    rotation: float  # degrees
    translation: np.ndarray
    center: np.ndarray
    kind: str = "background"
    extent: Tuple[float, float] = (0.0, 0.0)
    orientation: float = 0.0

    def forward(self, x, y):
        r = similarity_matrix(self.rotation, 1.0)
        dx, dy = x - self.center[0], y - self.center[1]
        return (
            r[0, 0] * dx + r[0, 1] * dy + self.center[0] + self.translation[0],
            r[1, 0] * dx + r[1, 1] * dy + self.center[1] + self.translation[1],
        )

    def inverse(self, x, y):
        r = similarity_matrix(-self.rotation, 1.0)
        dx, dy = x - self.center[0] - self.translation[0], y - self.center[1] - self.translation[1]
        return r[0, 0] * dx + r[0, 1] * dy + self.center[0], r[1, 0] * dx + r[1, 1] * dy + self.center[1]

    def contains(self, x, y):
        """Membership of reference-frame points."""
        if self.kind == "background":
            return np.ones(np.shape(x), dtype=bool)
        c, s = np.cos(np.deg2rad(self.orientation)), np.sin(np.deg2rad(self.orientation))
        dx, dy = x - self.center[0], y - self.center[1]
        lx, ly = c * dx + s * dy, -s * dx + c * dy
        a, b = self.extent
        if self.kind == "ellipse":
            return (lx / a) ** 2 + (ly / b) ** 2 <= 1.0
        return (np.abs(lx) <= a) & (np.abs(ly) <= b)

    def color(self, x, y):
        gx, gy = x / self.spacing, y / self.spacing
        chans = [
            ndimage.map_coordinates(self.texture[..., k], [gy.ravel(), gx.ravel()], order=1, mode="mirror").reshape(
                np.shape(x)
            )
            for k in range(3)
        ]
        return np.stack(chans, axis=-1)


def _make_texture(rng, w, h, spacing):
    gh, gw = int(np.ceil(h / spacing)) + 2, int(np.ceil(w / spacing)) + 2
    base = rng.uniform(0.15, 0.85, 3)
    grid = base + rng.normal(0.0, 0.18, (gh, gw, 3))
    return np.clip(grid, 0.0, 1.0)


def _draw_motion(rng, cfg, taken):
    for _ in range(1000):
        t = rng.uniform(-cfg.max_translation, cfg.max_translation, 2)
        if all(np.hypot(*(t - o)) >= cfg.min_relative_motion for o in taken):
            return t
    raise RuntimeError("could not draw distinct motions")


def _make_layers(rng, cfg: SynthConfig) -> List[_Layer]:
    w, h = cfg.width, cfg.height
    center = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    bg_t = _draw_motion(rng, cfg, [])
    layers = [_Layer(_make_texture(rng, w + 8, h + 8, 6.0), 6.0, 0.0, bg_t, center)]
    taken = [bg_t]
    n_shapes = int(rng.integers(1, cfg.max_shapes + 1))
    lo = min(w, h)
    for _ in range(n_shapes):
        t = _draw_motion(rng, cfg, taken)
        taken.append(t)
        c = np.array([rng.uniform(0.25 * w, 0.75 * w), rng.uniform(0.25 * h, 0.75 * h)])
        extent = (rng.uniform(0.1 * lo, 0.25 * lo), rng.uniform(0.1 * lo, 0.25 * lo))
        spacing = float(rng.uniform(3.0, 6.0))
        layers.append(
            _Layer(
                _make_texture(rng, w + 8, h + 8, spacing),
                spacing,
                float(rng.uniform(-cfg.max_rotation, cfg.max_rotation)),
                t,
                c,
                kind=str(rng.choice(["ellipse", "rectangle"])),
                extent=extent,
                orientation=float(rng.uniform(0.0, 180.0)),
            )
        )
    return layers


def _render(layers, xs, ys, frame: int):
    """Label map, colours and flow for frame 0 (reference) or frame 1 (moved)."""
    labels = np.zeros(xs.shape, dtype=np.int32)
    refs = []
    for k, layer in enumerate(layers):
        rx, ry = (xs, ys) if frame == 0 else layer.inverse(xs, ys)
        refs.append((rx, ry))
        labels[layer.contains(rx, ry)] = k
    img = np.zeros(xs.shape + (3,))
    flow = np.zeros(xs.shape + (2,))
    for k, layer in enumerate(layers):
        m = labels == k
        if not m.any():
            continue
        rx, ry = refs[k][0][m], refs[k][1][m]
        img[m] = layer.color(rx, ry)
        if frame == 0:
            tx, ty = layer.forward(rx, ry)
            flow[m] = np.stack([tx - xs[m], ty - ys[m]], -1)
        else:
            flow[m] = np.stack([rx - xs[m], ry - ys[m]], -1)
    return labels, img, flow


def occlusion_contour(labels: np.ndarray) -> np.ndarray:
    """Pixels whose layer lies in front of some 4-neighbour's layer."""
    p = np.pad(labels, 1, mode="edge")
    c = p[1:-1, 1:-1]
    out = np.zeros(labels.shape, dtype=bool)
    for nb in (p[:-2, 1:-1], p[2:, 1:-1], p[1:-1, :-2], p[1:-1, 2:]):
        out |= nb < c
    return out.astype(np.uint8)


def _quantize(img):
    return (np.round(np.clip(img, 0, 1) * 255.0) / 255.0).astype(np.float32)


def _initial_flow(gt, rng, cfg):
    f = gt.astype(np.float64)
    if cfg.flow_noise > 0:
        f = f + rng.normal(0.0, cfg.flow_noise, f.shape)
    if cfg.flow_smoothing > 0:
        f = ndimage.gaussian_filter(f, sigma=(cfg.flow_smoothing, cfg.flow_smoothing, 0), mode="nearest")
    return f.astype(np.float32)


def synth_sample(seed: int, cfg: SynthConfig) -> Sample:
    rng = np.random.default_rng(seed)
    layers = _make_layers(rng, cfg)
    ys, xs = np.mgrid[0 : cfg.height, 0 : cfg.width].astype(np.float64)
    labels1, img1, gt_fwd = _render(layers, xs, ys, 0)
    _, img2, gt_bwd = _render(layers, xs, ys, 1)
    f1, f2 = _quantize(img1), _quantize(img2)
    gt_fwd32, gt_bwd32 = gt_fwd.astype(np.float32), gt_bwd.astype(np.float32)
    noise_rng = np.random.default_rng([seed, 1])
    fwd = gt_fwd32 if cfg.flow_noise == 0 and cfg.flow_smoothing == 0 else _initial_flow(gt_fwd32, noise_rng, cfg)
    bwd = gt_bwd32 if cfg.flow_noise == 0 and cfg.flow_smoothing == 0 else _initial_flow(gt_bwd32, noise_rng, cfg)
    return Sample(
        frame1=f1,
        frame2=f2,
        fwd_flow=fwd,
        bwd_flow=bwd,
        fwd_warp_error=warping_error(f1, f2, fwd),
        bwd_warp_error=warping_error(f2, f1, bwd),
        gt_flow=gt_fwd32,
        gt_boundary=occlusion_contour(labels1),
    )


def synth_dataset(count: int, width: int = 64, height: int = 64, seed: int = 0, **options) -> List[Sample]:
    """``count`` scenes; scene ``i`` depends only on ``seed + i``."""
    if width <= 0 or height <= 0 or width % 16 or height % 16:
        raise ValueError(f"extents must be positive multiples of 16, got {width}x{height}")
    if count < 0:
        raise ValueError("count must be nonnegative")
    cfg = SynthConfig(width=width, height=height, **options)
    return [synth_sample(seed + i, cfg) for i in range(count)]


def sample_from_files(frame1, frame2, fwd_flow, bwd_flow, gt_flow, gt_boundary) -> Sample:
    """Build a sample from loaded arrays, computing warp errors."""
    f1 = np.asarray(frame1, dtype=np.float32)
    f2 = np.asarray(frame2, dtype=np.float32)
    _check_extents(f1, f2, fwd_flow, bwd_flow, gt_flow, gt_boundary)
    return Sample(
        frame1=f1,
        frame2=f2,
        fwd_flow=fwd_flow,
        bwd_flow=bwd_flow,
        fwd_warp_error=warping_error(f1, f2, fwd_flow),
        bwd_warp_error=warping_error(f2, f1, bwd_flow),
        gt_flow=gt_flow,
        gt_boundary=(np.asarray(gt_boundary) > 0.5).astype(np.uint8),
    )
