"""Dual-mode feature fusion for cooperative BEV perception.

With no neighbor features the ego map passes through untouched, so
individual perception is bit-identical to a standalone pipeline. With a
warped neighbor map, the two maps are reduced to a single channel,
turned into a per-cell weight map in [0, 1], and blended so the ego map
gets weight M and the neighbor map the complementary weight 1 - M.
Outside the overlap of the two grids the ego features always pass
through unchanged.

A maxout blend over the overlap is provided as the baseline fusion; its
gradient w.r.t. the neighbor map vanishes wherever the ego feature is
larger, which is exactly the failure mode the complementary weights
avoid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    BatchNormParams,
    ConvParams,
    Tensor,
    batchnorm2d,
    channel_max,
    channel_mean,
    concat_channels,
    conv2d,
    masked_max,
    masked_min,
    maximum,
    mul,
    relu,
    sigmoid,
    sub,
    where_mask,
)
from .errors import ShapeMismatchError
from .geometry import BEVFeatureMap, OverlapMask

REDUCE_MODES = ("conv", "mean", "max")
NORM_EPS = 1e-8


@dataclass
class WeightMap:
    raw: Tensor           # (1, H, W) pre-normalization
    normalized: Tensor    # (1, H, W) in [0, 1], exactly 0 off-overlap
    overlap: OverlapMask


@dataclass
class FusionParams:
    """Weights and ablation knobs for the fusion network."""
    reduce_mode: str
    reduce: ConvParams | None
    wnet: list[tuple[ConvParams, BatchNormParams]]
    fuse: ConvParams
    complementary: bool = True

    def __post_init__(self):
        if self.reduce_mode not in REDUCE_MODES:
            raise ValueError(f"unknown reduce mode {self.reduce_mode!r}")
        if not 1 <= len(self.wnet) <= 3:
            raise ValueError(f"weight net must have 1-3 layers, got {len(self.wnet)}")

    def parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        if self.reduce is not None:
            params += self.reduce.parameters()
        for conv, bn in self.wnet:
            params += conv.parameters() + bn.parameters()
        params += self.fuse.parameters()
        return params

    def n_params(self) -> int:
        total = self.fuse.n_params()
        if self.reduce is not None:
            total += self.reduce.n_params()
        for conv, bn in self.wnet:
            total += conv.n_params() + bn.n_params()
        return total

    def set_mode(self, mode: str) -> None:
        for _, bn in self.wnet:
            bn.mode = mode


def _conv_init(rng: np.random.Generator, out_ch: int, in_ch: int, k: int,
               dtype, stride: int = 1) -> ConvParams:
    std = np.sqrt(2.0 / (in_ch * k * k))
    kernel = (rng.standard_normal((out_ch, in_ch, k, k)) * std).astype(dtype)
    bias = np.zeros(out_ch, dtype=dtype)
    return ConvParams(Tensor(kernel, requires_grad=True),
                      Tensor(bias, requires_grad=True), stride=stride)


def init_fusion_params(channels: int, rng: np.random.Generator, *,
                       reduce_mode: str = "conv", layers: int = 2, kernel: int = 3,
                       complementary: bool = True, dtype=np.float64) -> FusionParams:
    if layers not in (1, 2, 3):
        raise ValueError(f"weight-net layers must be in {{1,2,3}}, got {layers}")
    if kernel not in (1, 3, 5):
        raise ValueError(f"weight-net kernel must be in {{1,3,5}}, got {kernel}")
    reduce = _conv_init(rng, 1, 2 * channels, 1, dtype) if reduce_mode == "conv" else None
    wnet = [(_conv_init(rng, 1, 1, kernel, dtype),
             BatchNormParams.identity(1, dtype=dtype)) for _ in range(layers)]
    fuse = _conv_init(rng, channels, 2 * channels, 1, dtype)
    return FusionParams(reduce_mode=reduce_mode, reduce=reduce, wnet=wnet,
                        fuse=fuse, complementary=complementary)


def _check_compatible(ego: BEVFeatureMap, warped: BEVFeatureMap) -> None:
    if ego.data.shape != warped.data.shape:
        raise ShapeMismatchError(
            f"feature shapes differ: {ego.data.shape} vs {warped.data.shape}")
    if ego.grid.shape != warped.grid.shape or ego.grid.resolution != warped.grid.resolution:
        raise ShapeMismatchError(
            f"grid geometry differs: {ego.grid} vs {warped.grid}")


def reduce_to_single_channel(ego: BEVFeatureMap, warped: BEVFeatureMap,
                             p: FusionParams) -> Tensor:
    """Condense the stacked ego+neighbor maps into one channel."""
    _check_compatible(ego, warped)
    stacked = concat_channels(ego.data, warped.data)
    if p.reduce_mode == "conv":
        return conv2d(stacked, p.reduce)
    if p.reduce_mode == "mean":
        return channel_mean(stacked)
    return channel_max(stacked)


def compute_weight_map(phi: Tensor, overlap: OverlapMask, p: FusionParams) -> WeightMap:
    """Residual weight net plus min-max normalization over the overlap.

    The raw map is phi + sigmoid(...conv/BN stack...); normalization
    rescales it to exactly [0, 1] over overlap cells and forces 0
    elsewhere. A constant raw map (span below 1e-8) degenerates to 0.5
    on the overlap.
    """
    t = phi
    last = len(p.wnet) - 1
    for idx, (conv, bn) in enumerate(p.wnet):
        t = batchnorm2d(conv2d(t, conv), bn)
        t = sigmoid(t) if idx == last else relu(t)
    raw = phi + t

    mask = overlap.mask[None]  # (1, H, W)
    zeros = Tensor(np.zeros_like(raw.data))
    if not overlap.any:
        return WeightMap(raw=raw, normalized=zeros, overlap=overlap)

    mn = masked_min(raw, mask)
    mx = masked_max(raw, mask)
    span = sub(mx, mn)
    if float(span.data) < NORM_EPS:
        flat = Tensor(np.where(mask, 0.5, 0.0).astype(raw.dtype))
        return WeightMap(raw=raw, normalized=flat, overlap=overlap)
    scaled = (raw - mn) / span
    return WeightMap(raw=raw, normalized=where_mask(mask, scaled, zeros), overlap=overlap)


def fuse_complementary(ego: BEVFeatureMap, warped: BEVFeatureMap,
                       m: WeightMap, p: FusionParams) -> Tensor:
    """Weighted blend: ego gets M, neighbor gets 1 - M (or 1 when the
    complementary branch is ablated), projected back to C channels.

    Off-overlap cells return the ego features bit-for-bit.
    """
    _check_compatible(ego, warped)
    w_ego = m.normalized
    ego_part = mul(ego.data, w_ego)
    if p.complementary:
        w_send = sub(Tensor(np.ones_like(w_ego.data)), w_ego)
    else:
        w_send = Tensor(np.ones_like(w_ego.data))
    send_part = mul(warped.data, w_send)
    fused = conv2d(concat_channels(ego_part, send_part), p.fuse)
    return where_mask(m.overlap.mask[None], fused, ego.data)


def fuse_maxout(ego: BEVFeatureMap, warped: BEVFeatureMap,
                overlap: OverlapMask) -> Tensor:
    """Elementwise max over the overlap; ego passthrough outside."""
    _check_compatible(ego, warped)
    return where_mask(overlap.mask[None], maximum(ego.data, warped.data), ego.data)


def forward_dual(ego: BEVFeatureMap, warped: BEVFeatureMap | None,
                 overlap: OverlapMask | None, p: FusionParams,
                 method: str = "complementary") -> Tensor:
    """Mode dispatch: ego passthrough without a neighbor, fusion with one."""
    if warped is None:
        return ego.data
    if overlap is None:
        raise ShapeMismatchError("cooperative mode needs the warp overlap mask")
    _check_compatible(ego, warped)
    if method == "maxout":
        return fuse_maxout(ego, warped, overlap)
    if method != "complementary":
        raise ValueError(f"unknown fusion method {method!r}")
    phi = reduce_to_single_channel(ego, warped, p)
    m = compute_weight_map(phi, overlap, p)
    return fuse_complementary(ego, warped, m, p)
