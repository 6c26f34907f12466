"""The boundary refinement network and the flow-boundary fusion network."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

# Table-1 channel counts of the full-size network
CONTRACTION_CHANNELS = (64, 128, 256, 512)
REFINE_CHANNELS = (256, 128, 64, 32)
INPUT_CHANNELS = 9


@dataclass
class RefineNetConfig:
    input_height: int = 320
    input_width: int = 448
    input_channels: int = INPUT_CHANNELS
    width_multiplier: float = 1.0
    dilation_rates: Tuple[int, int] = (2, 4)

    def channels(self, full: int) -> int:
        return int(round(full * self.width_multiplier))

    def validate(self) -> None:
        if self.input_height <= 0 or self.input_width <= 0:
            raise ValueError("input extents must be positive")
        if self.input_height % 16 or self.input_width % 16:
            raise ValueError(f"input extents must be divisible by 16, got {self.input_height}x{self.input_width}")
        if self.input_channels < 1:
            raise ValueError("input_channels must be >= 1")
        if not 0 < self.width_multiplier <= 1:
            raise ValueError("width_multiplier must lie in (0, 1]")
        for c in CONTRACTION_CHANNELS + REFINE_CHANNELS:
            if c * self.width_multiplier < 1:
                raise ValueError(f"width_multiplier {self.width_multiplier} leaves a layer with no channels")
        if len(self.dilation_rates) != 2 or min(self.dilation_rates) < 1:
            raise ValueError("dilation_rates must be two positive integers")


@dataclass
class FusionNetConfig:
    layer_count: int = 8
    kernel: int = 5
    feature_maps: int = 64

    def validate(self) -> None:
        if self.layer_count < 1 or self.feature_maps < 1:
            raise ValueError("layer_count and feature_maps must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel must be a positive odd size")


def _he(rng, shape, fan_in, dtype):
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class Network:
    """Ordered named parameters plus the config that shaped them."""

    kind = "network"

    def __init__(self, cfg, params: Dict[str, Tensor]):
        self.cfg = cfg
        self.params = params

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def set_requires_grad(self, flag: bool) -> None:
        T.parameters_require_grad(self.params.values(), flag)

    def astype(self, dtype) -> "Network":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad) for k, v in self.params.items()}
        return type(self)(self.cfg, params)

    def config_dict(self) -> dict:
        return {"kind": self.kind, **asdict(self.cfg)}

    # conv helpers keyed by parameter prefix
    def _conv(self, name, x, pad=None, dilation=1, act=True):
        w = self.params[name + ".weight"]
        k = w.shape[-1]
        pad = dilation * (k // 2) if pad is None else pad
        y = T.conv2d(x, w, self.params[name + ".bias"], 1, pad, dilation)
        return T.relu(y) if act else y

    def _deconv(self, name, x):
        return T.relu(T.conv_transpose2d(x, self.params[name + ".weight"], self.params[name + ".bias"], 2))


class RefineNet(Network):
    """Contraction path of paired 3x3 convs and 2x2 pools, then four refine blocks.

    Each refine block upsamples the previous output with a 2x2 stride-2
    deconvolution, concatenates the same-resolution contraction feature,
    applies ``conv_in`` and the multi-scale fusion unit. A 1x1 conv and
    sigmoid turn the last block's features into boundary probabilities.
    """

    kind = "refinenet"

    def forward(self, x: Tensor, trace: Optional[Dict[str, Tensor]] = None) -> Tensor:
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1:] != (cfg.input_channels, cfg.input_height, cfg.input_width):
            raise ShapeError(
                f"expected (N, {cfg.input_channels}, {cfg.input_height}, {cfg.input_width}) input, got {x.shape}"
            )
        rec = trace if trace is not None else {}
        skips = []
        h = x
        for stage, names in enumerate((("conv1", "conv2"), ("conv3", "conv4"), ("conv5_1", "conv5_2"), ("conv7_1", "conv7_2"))):
            for n in names:
                h = self._conv(n, h)
            rec[_CONTRACTION_ROWS[stage]] = h
            skips.append(h)
            h = T.maxpool2(h)
            rec[f"pool{stage + 1}"] = h
        for b in range(4):
            h = self._deconv(f"deconv{5 - b}", h)
            rec[f"deconv{5 - b}"] = h
            h = self._refine_block(f"refine{b + 1}", h, skips[3 - b])
            rec[f"refine-{b + 1}"] = h
        out = T.sigmoid(self._conv("head", h, pad=0, act=False))
        rec["head"] = out
        return out

    def _refine_block(self, name, up, skip):
        x0 = self._conv(name + ".conv_in", T.concat_channels(up, skip))
        return self.fusion_unit(name, x0)

    def fusion_unit(self, name: str, x0: Tensor, branches=("f1", "f3", "f5", "input")) -> Tensor:
        """Multi-scale fusion: f1 -> f2 (dilated) -> f3 -> f4 (dilated) -> f5, summed with the input.

        conv-f-3 sees conv-f-1 and conv-f-2 summed, conv-f-5 sees conv-f-3 and
        conv-f-4 summed. ``branches`` selects the terms of the output sum.
        """
        d2, d4 = self.cfg.dilation_rates
        a1 = self._conv(name + ".conv_f1", x0)
        a2 = self._conv(name + ".conv_f2", a1, dilation=d2)
        a3 = self._conv(name + ".conv_f3", T.add(a1, a2))
        a4 = self._conv(name + ".conv_f4", a3, dilation=d4)
        a5 = self._conv(name + ".conv_f5", T.add(a3, a4))
        terms = {"f1": a1, "f3": a3, "f5": a5, "input": x0}
        out = None
        for b in branches:
            out = terms[b] if out is None else T.add(out, terms[b])
        return out


_CONTRACTION_ROWS = ("conv1,2", "conv3,4", "conv5,6", "conv7,8")


def refinenet_layer_shapes(cfg: RefineNetConfig) -> Dict[str, Tuple[int, int, int]]:
    """Expected (height, width, channels) of every named layer."""
    h, w = cfg.input_height, cfg.input_width
    out = {}
    for s, c in enumerate(CONTRACTION_CHANNELS):
        out[_CONTRACTION_ROWS[s]] = (h >> s, w >> s, cfg.channels(c))
        out[f"pool{s + 1}"] = (h >> (s + 1), w >> (s + 1), cfg.channels(c))
    for b, c in enumerate(REFINE_CHANNELS):
        out[f"deconv{5 - b}"] = (h >> (3 - b), w >> (3 - b), cfg.channels(c))
        out[f"refine-{b + 1}"] = (h >> (3 - b), w >> (3 - b), cfg.channels(c))
    out["head"] = (h, w, 1)
    return out


def build_refinenet(cfg: RefineNetConfig, seed: int = 0, dtype=np.float64) -> RefineNet:
    cfg.validate()
    rng = np.random.default_rng(seed)
    p: Dict[str, Tensor] = {}

    def conv(name, cin, cout, k=3, zero=False):
        shape = (cout, cin, k, k)
        p[name + ".weight"] = _zeros(shape, dtype) if zero else _he(rng, shape, cin * k * k, dtype)
        p[name + ".bias"] = _zeros((cout,), dtype)

    def deconv(name, cin, cout):
        p[name + ".weight"] = _he(rng, (cin, cout, 2, 2), cin, dtype)
        p[name + ".bias"] = _zeros((cout,), dtype)

    cc = [cfg.channels(c) for c in CONTRACTION_CHANNELS]
    rc = [cfg.channels(c) for c in REFINE_CHANNELS]
    cin = cfg.input_channels
    for names, c in zip((("conv1", "conv2"), ("conv3", "conv4"), ("conv5_1", "conv5_2"), ("conv7_1", "conv7_2")), cc):
        for n in names:
            conv(n, cin, c)
            cin = c
    prev = cc[-1]
    for b, c in enumerate(rc):
        deconv(f"deconv{5 - b}", prev, c)
        name = f"refine{b + 1}"
        conv(name + ".conv_in", c + cc[3 - b], c)
        for f in range(1, 6):
            conv(f"{name}.conv_f{f}", c, c)
        prev = c
    conv("head", prev, 1, k=1, zero=True)
    return RefineNet(cfg, p)


def forward_refinenet(net: RefineNet, stack: Tensor) -> Tensor:
    return net.forward(stack)


class FusionNet(Network):
    """Stacked 5x5 conv layers; each emits a 2-channel flow residue through a 1x1 head.

    Layer k+1 sees layer k's features concatenated with residue k. The refined
    flow is the initial flow plus the last residue.
    """

    kind = "fusion"

    def forward(self, f0: Tensor, m: Tensor) -> Tuple[List[Tensor], Tensor]:
        if f0.ndim != 4 or f0.shape[1] != 2:
            raise ShapeError(f"flow must be (N, 2, H, W), got {f0.shape}")
        if m.ndim != 4 or m.shape[1] != 1 or m.shape[0] != f0.shape[0] or m.shape[2:] != f0.shape[2:]:
            raise ShapeError(f"boundary map {m.shape} does not match flow {f0.shape}")
        h = T.concat_channels(f0, m)
        residues = []
        for k in range(1, self.cfg.layer_count + 1):
            feat = self._conv(f"layer{k}", h)
            r = self._conv(f"residue{k}", feat, pad=0, act=False)
            residues.append(r)
            h = T.concat_channels(feat, r)
        return residues, T.add(f0, residues[-1])


def build_fusion_net(cfg: FusionNetConfig, seed: int = 0, dtype=np.float64) -> FusionNet:
    cfg.validate()
    rng = np.random.default_rng(seed)
    p: Dict[str, Tensor] = {}
    cin, k, c = 3, cfg.kernel, cfg.feature_maps
    for layer in range(1, cfg.layer_count + 1):
        p[f"layer{layer}.weight"] = _he(rng, (c, cin, k, k), cin * k * k, dtype)
        p[f"layer{layer}.bias"] = _zeros((c,), dtype)
        # zero residue heads make the untrained network an identity on f0
        p[f"residue{layer}.weight"] = _zeros((2, c, 1, 1), dtype)
        p[f"residue{layer}.bias"] = _zeros((2,), dtype)
        cin = c + 2
    return FusionNet(cfg, p)


def forward_fusion(net: FusionNet, f0: Tensor, m: Tensor) -> Tuple[List[Tensor], Tensor]:
    return net.forward(f0, m)


# --- inputs -----------------------------------------------------------------------


def assemble_input_stack(image, fwd_flow, fwd_warp_err, bwd_flow, bwd_warp_err, dtype=np.float64) -> Tensor:
    """Nine-channel (1, 9, H, W) stack: RGB, forward u v, forward warp error, backward u v, backward warp error.

    Flow channels are divided by the image diagonal.
    """
    image = np.asarray(image)
    h, w = image.shape[:2]
    for a in (fwd_flow, fwd_warp_err, bwd_flow, bwd_warp_err):
        if np.shape(a)[:2] != (h, w):
            raise ShapeError(f"extent mismatch: {np.shape(a)[:2]} vs {(h, w)}")
    diag = np.hypot(h, w)
    chans = [
        image.transpose(2, 0, 1),
        np.asarray(fwd_flow).transpose(2, 0, 1) / diag,
        np.asarray(fwd_warp_err)[None],
        np.asarray(bwd_flow).transpose(2, 0, 1) / diag,
        np.asarray(bwd_warp_err)[None],
    ]
    return Tensor(np.concatenate(chans, axis=0)[None].astype(dtype))


def sample_stack(sample, dtype=np.float64) -> Tensor:
    return assemble_input_stack(
        sample.frame1, sample.fwd_flow, sample.fwd_warp_error, sample.bwd_flow, sample.bwd_warp_error, dtype
    )


def batch_stack(samples, dtype=np.float64) -> Tensor:
    return Tensor(np.concatenate([sample_stack(s, dtype).data for s in samples], axis=0))


def flow_tensor(flows, dtype=np.float64) -> Tensor:
    """(H, W, 2) arrays -> (N, 2, H, W) tensor."""
    return Tensor(np.stack([np.asarray(f).transpose(2, 0, 1) for f in flows]).astype(dtype))


def tensor_to_flows(t: Tensor) -> List[np.ndarray]:
    return [np.ascontiguousarray(f.transpose(1, 2, 0)) for f in t.data]
