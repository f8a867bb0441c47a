"""End-to-end rotated-box detector with joint dual-mode training.

A small conv+BN+ReLU stack turns the occupancy raster into a BEV
feature map (one stride-2 stage). One detection head — a single
parameter set shared by both perception modes — emits per-anchor
objectness logits and box offsets. Training runs the individual branch
(ego features only) and the cooperative branch (ego features fused with
the warped sender features) on the same sample, combines the two losses
with a configurable balance, and backpropagates once.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import (
    BatchNormParams,
    ConvParams,
    Tensor,
    batchnorm2d,
    conv2d,
    mul,
    relu,
    sigmoid,
    sin,
    smooth_l1,
    softplus,
    sum_all,
)
from .boxes import DetectionBox, normalize_half_angle, rotated_iou, rotated_nms
from .comms import FeatureMessage
from .config import ExperimentConfig, ModelConfig, TrainConfig, config_hash
from .errors import CheckpointError, NumericalError, ShapeMismatchError
from .fusion import FusionParams, forward_dual, init_fusion_params, _conv_init
from .geometry import (
    BEVFeatureMap,
    GridSpec,
    OverlapMask,
    Pose2D,
    relative_transform,
    warp_feature_map,
)
from .scene import PointSet, rasterize_bev

RASTER_CHANNELS = 3
ANCHOR_ANGLES = (0.0, math.pi / 2)
FOCAL_ALPHA = 0.25  # focal exponent is fixed at 2 (implemented by squaring)
REG_LOSS_WEIGHT = 2.0


# -- model ---------------------------------------------------------------------

@dataclass
class ExtractorBlock:
    conv: ConvParams
    bn: BatchNormParams


class DetectionModel:
    """Extractor blocks + fusion network + the single shared head."""

    def __init__(self, extractor: list[ExtractorBlock], fusion: FusionParams,
                 head_cls: ConvParams, head_reg: ConvParams, cfg: ModelConfig):
        self.extractor = extractor
        self.fusion = fusion
        self.head_cls = head_cls
        self.head_reg = head_reg
        self.cfg = cfg

    def named_parameters(self) -> dict[str, Tensor]:
        named: dict[str, Tensor] = {}
        for i, blk in enumerate(self.extractor):
            named[f"extractor.{i}.conv.kernel"] = blk.conv.kernel
            named[f"extractor.{i}.conv.bias"] = blk.conv.bias
            named[f"extractor.{i}.bn.gamma"] = blk.bn.gamma
            named[f"extractor.{i}.bn.beta"] = blk.bn.beta
        if self.fusion.reduce is not None:
            named["fusion.reduce.kernel"] = self.fusion.reduce.kernel
            named["fusion.reduce.bias"] = self.fusion.reduce.bias
        for i, (conv, bn) in enumerate(self.fusion.wnet):
            named[f"fusion.wnet.{i}.conv.kernel"] = conv.kernel
            named[f"fusion.wnet.{i}.conv.bias"] = conv.bias
            named[f"fusion.wnet.{i}.bn.gamma"] = bn.gamma
            named[f"fusion.wnet.{i}.bn.beta"] = bn.beta
        named["head.cls.kernel"] = self.head_cls.kernel
        named["head.cls.bias"] = self.head_cls.bias
        named["head.reg.kernel"] = self.head_reg.kernel
        named["head.reg.bias"] = self.head_reg.bias
        named["fusion.fuse.kernel"] = self.fusion.fuse.kernel
        named["fusion.fuse.bias"] = self.fusion.fuse.bias
        return named

    def named_buffers(self) -> dict[str, np.ndarray]:
        bufs: dict[str, np.ndarray] = {}
        for i, blk in enumerate(self.extractor):
            bufs[f"extractor.{i}.bn.running_mean"] = blk.bn.running_mean
            bufs[f"extractor.{i}.bn.running_var"] = blk.bn.running_var
        for i, (_, bn) in enumerate(self.fusion.wnet):
            bufs[f"fusion.wnet.{i}.bn.running_mean"] = bn.running_mean
            bufs[f"fusion.wnet.{i}.bn.running_var"] = bn.running_var
        return bufs

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def set_mode(self, mode: str) -> None:
        for blk in self.extractor:
            blk.bn.mode = mode
        self.fusion.set_mode(mode)

    def train(self) -> None:
        self.set_mode("train")

    def eval(self) -> None:
        self.set_mode("eval")


def build_model(cfg: ModelConfig, seed: int) -> DetectionModel:
    rng = np.random.default_rng([int(seed), 7])
    dtype = cfg.np_dtype
    blocks: list[ExtractorBlock] = []
    in_ch = RASTER_CHANNELS
    for out_ch, stride in zip(cfg.extractor_channels, cfg.extractor_strides):
        blocks.append(ExtractorBlock(
            conv=_conv_init(rng, out_ch, in_ch, 3, dtype, stride=stride),
            bn=BatchNormParams.identity(out_ch, dtype=dtype),
        ))
        in_ch = out_ch
    fusion = init_fusion_params(
        cfg.feature_channels, rng,
        reduce_mode=cfg.fusion.reduce, layers=cfg.fusion.layers,
        kernel=cfg.fusion.kernel, complementary=cfg.fusion.complementary,
        dtype=dtype)
    head_cls = _conv_init(rng, len(ANCHOR_ANGLES), cfg.feature_channels, 1, dtype)
    head_reg = _conv_init(rng, len(ANCHOR_ANGLES) * 5, cfg.feature_channels, 1, dtype)
    return DetectionModel(blocks, fusion, head_cls, head_reg, cfg)


def extract_features(raster: Tensor, model: DetectionModel, grid: GridSpec,
                     pose: Pose2D, source_id: int = -1) -> BEVFeatureMap:
    """Run the conv stack over a (3, H, W) raster; output grid is downsampled."""
    if raster.data.ndim != 3 or raster.shape[0] != RASTER_CHANNELS:
        raise ShapeMismatchError(
            f"raster must be ({RASTER_CHANNELS}, H, W), got {raster.shape}")
    if raster.shape[1:] != grid.shape:
        raise ShapeMismatchError(f"raster {raster.shape} does not match grid {grid.shape}")
    t = raster
    for blk in model.extractor:
        t = relu(batchnorm2d(conv2d(t, blk.conv), blk.bn))
    fgrid = grid.downsampled(model.cfg.feature_stride).with_origin(pose)
    return BEVFeatureMap(data=t, pose=pose, grid=fgrid, source_id=source_id)


def head_forward(f: Tensor, model: DetectionModel) -> tuple[Tensor, Tensor]:
    """Per-anchor objectness logits (2, H', W') and offsets (10, H', W')."""
    return conv2d(f, model.head_cls), conv2d(f, model.head_reg)


# -- anchors and box coding ------------------------------------------------------

@dataclass
class AnchorGrid:
    """Two anchors (headings 0 and pi/2) at every feature-grid cell."""
    centers_x: np.ndarray        # (H', W')
    centers_y: np.ndarray
    w0: float
    l0: float

    @classmethod
    def for_grid(cls, fgrid: GridSpec, w0: float, l0: float) -> "AnchorGrid":
        r = fgrid.resolution
        i = np.arange(fgrid.h)[:, None]
        j = np.arange(fgrid.w)[None, :]
        cx = (i + 0.5 - fgrid.h / 2.0) * r + np.zeros((fgrid.h, fgrid.w))
        cy = (j + 0.5 - fgrid.w / 2.0) * r + np.zeros((fgrid.h, fgrid.w))
        return cls(centers_x=cx, centers_y=cy, w0=w0, l0=l0)

    @property
    def shape(self) -> tuple[int, int]:
        return self.centers_x.shape

    @property
    def diag(self) -> float:
        return math.hypot(self.w0, self.l0)

    def anchor_box(self, rot: int, i: int, j: int) -> DetectionBox:
        return DetectionBox(x=self.centers_x[i, j], y=self.centers_y[i, j],
                            w=self.w0, l=self.l0, theta=ANCHOR_ANGLES[rot])

    def encode(self, gt: DetectionBox, rot: int, i: int, j: int) -> np.ndarray:
        d = self.diag
        return np.array([
            (gt.x - self.centers_x[i, j]) / d,
            (gt.y - self.centers_y[i, j]) / d,
            math.log(gt.w / self.w0),
            math.log(gt.l / self.l0),
            gt.theta - ANCHOR_ANGLES[rot],
        ])

    def decode(self, delta: np.ndarray, rot: int, i: int, j: int,
               score: float | None = None) -> DetectionBox:
        d = self.diag
        dw = float(np.clip(delta[2], -10.0, 10.0))
        dl = float(np.clip(delta[3], -10.0, 10.0))
        return DetectionBox(
            x=self.centers_x[i, j] + delta[0] * d,
            y=self.centers_y[i, j] + delta[1] * d,
            w=self.w0 * math.exp(dw),
            l=self.l0 * math.exp(dl),
            theta=normalize_half_angle(ANCHOR_ANGLES[rot] + delta[4]),
            score=score,
        )


@dataclass
class Targets:
    labels: np.ndarray          # (2, H', W') in {1 pos, 0 neg, -1 ignore}
    reg: np.ndarray             # (2, 5, H', W')
    n_pos: int


def build_targets(gts: Sequence[DetectionBox], anchors: AnchorGrid,
                  pos_iou: float = 0.6, neg_iou: float = 0.45) -> Targets:
    """IoU-matched anchor targets; each gt also claims its best anchor."""
    hp, wp = anchors.shape
    best_iou = np.zeros((2, hp, wp))
    best_gt = -np.ones((2, hp, wp), dtype=np.int64)

    gt_best: list[tuple[float, tuple[int, int, int] | None]] = []
    for gi, gt in enumerate(gts):
        rad = 0.5 * math.hypot(gt.w, gt.l) + 0.5 * anchors.diag + anchors.diag
        near = ((anchors.centers_x - gt.x) ** 2 + (anchors.centers_y - gt.y) ** 2) <= rad * rad
        top: tuple[float, tuple[int, int, int] | None] = (0.0, None)
        for i, j in zip(*np.nonzero(near)):
            for rot in range(2):
                iou = rotated_iou(gt, anchors.anchor_box(rot, i, j))
                if iou > best_iou[rot, i, j]:
                    best_iou[rot, i, j] = iou
                    best_gt[rot, i, j] = gi
                if iou > top[0]:
                    top = (iou, (rot, int(i), int(j)))
        gt_best.append(top)

    labels = np.where(best_iou >= pos_iou, 1,
                      np.where(best_iou <= neg_iou, 0, -1)).astype(np.int8)
    for gi, (iou, loc) in enumerate(gt_best):
        if loc is None or iou <= 0.0:
            continue
        rot, i, j = loc
        labels[rot, i, j] = 1
        if best_gt[rot, i, j] < 0:
            best_gt[rot, i, j] = gi

    reg = np.zeros((2, 5, hp, wp))
    for rot, i, j in zip(*np.nonzero(labels == 1)):
        reg[rot, :, i, j] = anchors.encode(gts[best_gt[rot, i, j]], rot, i, j)
    return Targets(labels=labels, reg=reg, n_pos=int((labels == 1).sum()))


def compute_loss(cls: Tensor, reg: Tensor, targets: Targets) -> Tensor:
    """Focal classification loss plus smooth-L1 regression on positives.

    The heading residual goes through sin() so boxes equal up to a
    half-turn cost nothing. Total is L_cls + 2 * L_reg, both normalized
    by the positive count.
    """
    dtype = cls.dtype
    pos = Tensor((targets.labels == 1).astype(dtype))
    neg = Tensor((targets.labels == 0).astype(dtype))
    n_pos = float(max(targets.n_pos, 1))

    sig_nz = sigmoid(-cls)
    sig_z = sigmoid(cls)
    term_pos = mul(mul(sig_nz, sig_nz), softplus(-cls)) * FOCAL_ALPHA
    term_neg = mul(mul(sig_z, sig_z), softplus(cls)) * (1.0 - FOCAL_ALPHA)
    l_cls = sum_all(mul(term_pos, pos) + mul(term_neg, neg)) * (1.0 / n_pos)

    hp, wp = targets.labels.shape[1:]
    reg_t = Tensor(targets.reg.reshape(10, hp, wp).astype(dtype))
    pos10 = np.repeat(targets.labels == 1, 5, axis=0).reshape(10, hp, wp)
    angle = np.zeros((10, hp, wp), dtype=bool)
    angle[4] = angle[9] = True
    lin_mask = Tensor((pos10 & ~angle).astype(dtype))
    ang_mask = Tensor((pos10 & angle).astype(dtype))

    residual = reg - reg_t
    l_reg = sum_all(mul(smooth_l1(residual), lin_mask)
                    + mul(smooth_l1(sin(residual)), ang_mask)) * (1.0 / n_pos)
    return l_cls + l_reg * REG_LOSS_WEIGHT


def decode_predictions(cls_logits: np.ndarray, reg: np.ndarray, anchors: AnchorGrid,
                       score_threshold: float, nms_iou: float,
                       clip_grid: GridSpec | None = None) -> list[DetectionBox]:
    """Sigmoid-score anchors above threshold, decoded and deduplicated."""
    scores = 0.5 * (1.0 + np.tanh(0.5 * cls_logits))
    hp, wp = anchors.shape
    reg5 = reg.reshape(2, 5, hp, wp)
    cands: list[DetectionBox] = []
    for rot, i, j in zip(*np.nonzero(scores >= score_threshold)):
        box = anchors.decode(reg5[rot, :, i, j], rot, int(i), int(j),
                             score=float(scores[rot, i, j]))
        if clip_grid is not None and (
                abs(box.x) > clip_grid.x_extent or abs(box.y) > clip_grid.y_extent):
            continue
        cands.append(box)
    return rotated_nms(cands, nms_iou)


# -- optimizer -------------------------------------------------------------------

class Adam:
    """Adaptive-moment optimizer over a fixed parameter list."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for k, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * (g * g)
            mhat = self.m[k] / bc1
            vhat = self.v[k] / bc2
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)


# -- training ---------------------------------------------------------------------

@dataclass
class TrainSample:
    ego_points: PointSet
    sender_points: PointSet
    sender_pose: Pose2D
    gts: list[DetectionBox]
    seed: int = 0


@dataclass
class EpochRecord:
    epoch: int
    loss_total: float
    loss_individual: float
    loss_cooperative: float

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "loss_total": self.loss_total,
                "loss_individual": self.loss_individual,
                "loss_cooperative": self.loss_cooperative}


def _cooperative_features(model: DetectionModel, f_ego: BEVFeatureMap,
                          sample: TrainSample, grid: GridSpec,
                          dtype) -> tuple[BEVFeatureMap, OverlapMask]:
    sender_grid = grid.with_origin(sample.sender_pose)
    raster = rasterize_bev(sample.sender_points, sender_grid, dtype=dtype)
    f_send = extract_features(raster, model, sender_grid, sample.sender_pose, source_id=1)
    a = relative_transform(sample.sender_pose, f_ego.pose, f_ego.grid, f_send.grid)
    warped, mask = warp_feature_map(f_send, a, out_grid=f_ego.grid, out_pose=f_ego.pose)
    return warped, mask


def train_joint(samples: Sequence[TrainSample], grid: GridSpec,
                model_cfg: ModelConfig, train_cfg: TrainConfig, seed: int,
                on_epoch: Callable[[EpochRecord], None] | None = None,
                ) -> tuple[DetectionModel, Adam, list[EpochRecord]]:
    """Joint individual+cooperative training; one backprop per step.

    Per step: L = balance * L_individual + (1 - balance) * L_cooperative.
    With balance == 1 the cooperative branch is skipped entirely, which
    leaves exactly zero gradient on all fusion parameters.
    """
    model = build_model(model_cfg, seed)
    model.train()
    adam = Adam(model.parameters(), lr=train_cfg.learning_rate)
    dtype = model_cfg.np_dtype
    lam = train_cfg.loss_balance
    ego_pose = Pose2D(0.0, 0.0, 0.0)
    anchors = AnchorGrid.for_grid(grid.downsampled(model_cfg.feature_stride),
                                  model_cfg.anchor_w, model_cfg.anchor_l)
    target_cache: dict[int, Targets] = {}
    records: list[EpochRecord] = []
    total_steps = max(train_cfg.epochs * len(samples), 1)
    base_lr = train_cfg.learning_rate
    step = 0

    for epoch in range(train_cfg.epochs):
        tot = ind = coop = 0.0
        for idx, sample in enumerate(samples):
            if getattr(train_cfg, "lr_decay", "none") == "cosine":
                frac = step / total_steps
                adam.lr = base_lr * (0.05 + 0.95 * 0.5 * (1.0 + math.cos(math.pi * frac)))
            step += 1
            targets = target_cache.get(idx)
            if targets is None:
                targets = build_targets(sample.gts, anchors,
                                        model_cfg.pos_iou, model_cfg.neg_iou)
                target_cache[idx] = targets

            ego_grid = grid.with_origin(ego_pose)
            raster = rasterize_bev(sample.ego_points, ego_grid, dtype=dtype)
            f_ego = extract_features(raster, model, ego_grid, ego_pose, source_id=0)
            l_ind = compute_loss(*head_forward(f_ego.data, model), targets)

            if lam < 1.0:
                warped, mask = _cooperative_features(model, f_ego, sample, grid, dtype)
                fused = forward_dual(f_ego, warped, mask, model.fusion)
                l_coop = compute_loss(*head_forward(fused, model), targets)
                total = l_ind * lam + l_coop * (1.0 - lam)
            else:
                l_coop = None
                total = l_ind

            loss_val = float(total.data)
            if not math.isfinite(loss_val):
                raise NumericalError(
                    f"training diverged at epoch {epoch} sample {idx}: loss={loss_val}")
            adam.zero_grad()
            total.backward()
            adam.step()

            tot += loss_val
            ind += float(l_ind.data)
            coop += float(l_coop.data) if l_coop is not None else 0.0
        n = max(len(samples), 1)
        rec = EpochRecord(epoch=epoch, loss_total=tot / n,
                          loss_individual=ind / n, loss_cooperative=coop / n)
        records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return model, adam, records


# -- inference --------------------------------------------------------------------

def infer(ego_raster: Tensor, message: FeatureMessage | None,
          model: DetectionModel, grid: GridSpec,
          ego_pose: Pose2D = Pose2D(0.0, 0.0, 0.0),
          fusion_method: str = "complementary",
          clip_to_grid: bool = True) -> list[DetectionBox]:
    """Extractor -> fusion dispatch -> head -> decode -> NMS."""
    model.eval()
    f_ego = extract_features(ego_raster, model, grid.with_origin(ego_pose),
                             ego_pose, source_id=0)
    warped = overlap = None
    if message is not None:
        if message.shape[0] != model.cfg.feature_channels:
            raise ShapeMismatchError(
                f"message carries {message.shape[0]} channels, "
                f"model expects {model.cfg.feature_channels}")
        f_send = BEVFeatureMap(
            data=Tensor(message.payload.astype(model.cfg.np_dtype)),
            pose=message.pose, grid=message.grid, source_id=message.sender_id)
        a = relative_transform(message.pose, ego_pose, f_ego.grid, f_send.grid)
        warped, overlap = warp_feature_map(f_send, a, out_grid=f_ego.grid,
                                           out_pose=ego_pose)
    fused = forward_dual(f_ego, warped, overlap, model.fusion, method=fusion_method)
    cls, reg = head_forward(fused, model)
    anchors = AnchorGrid.for_grid(f_ego.grid, model.cfg.anchor_w, model.cfg.anchor_l)
    return decode_predictions(cls.data, reg.data, anchors,
                              model.cfg.score_threshold, model.cfg.nms_iou,
                              clip_grid=grid if clip_to_grid else None)


# -- checkpoint container -----------------------------------------------------------

CKPT_MAGIC = b"BVCK"
CKPT_VERSION = 1
_DTYPE_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


@dataclass
class ModelCheckpoint:
    config_hash: str
    seed: int
    blobs: dict[str, np.ndarray] = field(default_factory=dict)


def snapshot(model: DetectionModel, adam: Adam | None,
             cfg_hash: str, seed: int) -> ModelCheckpoint:
    blobs: dict[str, np.ndarray] = {}
    named = model.named_parameters()
    for name, p in named.items():
        blobs[name] = p.data.copy()
    for name, b in model.named_buffers().items():
        blobs[name] = b.copy()
    if adam is not None:
        names = list(named)
        for k, name in enumerate(names):
            blobs[f"adam.{name}.m"] = adam.m[k].copy()
            blobs[f"adam.{name}.v"] = adam.v[k].copy()
        blobs["adam.t"] = np.array([adam.t], dtype=np.int64)
    return ModelCheckpoint(config_hash=cfg_hash, seed=seed, blobs=blobs)


def restore_model(ckpt: ModelCheckpoint, cfg: ExperimentConfig) -> DetectionModel:
    """Rebuild a model from a checkpoint; the config hash must match."""
    expected = config_hash(cfg)
    if ckpt.config_hash != expected:
        raise CheckpointError(
            f"checkpoint built for config {ckpt.config_hash}, current is {expected}")
    model = build_model(cfg.model, ckpt.seed)
    named = model.named_parameters()
    buffers = model.named_buffers()
    for name, p in named.items():
        if name not in ckpt.blobs:
            raise CheckpointError(f"checkpoint missing parameter {name}")
        if ckpt.blobs[name].shape != p.data.shape:
            raise CheckpointError(f"checkpoint blob {name} has wrong shape")
        p.data = ckpt.blobs[name].astype(p.dtype).copy()
    for name, b in buffers.items():
        if name in ckpt.blobs:
            b[:] = ckpt.blobs[name]
    return model


def save_checkpoint(path: str | Path, ckpt: ModelCheckpoint) -> None:
    """Versioned little-endian container; see README for the layout."""
    parts = [CKPT_MAGIC, struct.pack("<H", CKPT_VERSION)]
    h = ckpt.config_hash.encode()
    parts.append(struct.pack("<H", len(h)))
    parts.append(h)
    parts.append(struct.pack("<Q", ckpt.seed))
    parts.append(struct.pack("<I", len(ckpt.blobs)))
    for name in sorted(ckpt.blobs):
        arr = ckpt.blobs[name]
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_TAGS:
            dt = np.dtype("<f8")
        data = np.ascontiguousarray(arr, dtype=dt)
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BB", _DTYPE_TAGS[dt], data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(data.tobytes())
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path: str | Path) -> ModelCheckpoint:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError as e:
        raise CheckpointError(f"checkpoint not found: {path}") from e
    if len(raw) < 4 or raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"not a checkpoint file: {path}")
    body, crc = raw[:-4], struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"checkpoint checksum mismatch: {path}")
    off = 4
    version, = struct.unpack_from("<H", body, off); off += 2
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    hlen, = struct.unpack_from("<H", body, off); off += 2
    cfg_hash = body[off:off + hlen].decode(); off += hlen
    seed, = struct.unpack_from("<Q", body, off); off += 8
    count, = struct.unpack_from("<I", body, off); off += 4
    blobs: dict[str, np.ndarray] = {}
    for _ in range(count):
        nlen, = struct.unpack_from("<H", body, off); off += 2
        name = body[off:off + nlen].decode(); off += nlen
        tag, ndim = struct.unpack_from("<BB", body, off); off += 2
        shape = struct.unpack_from(f"<{ndim}I", body, off); off += 4 * ndim
        dt = _TAG_DTYPES.get(tag)
        if dt is None:
            raise CheckpointError(f"unknown dtype tag {tag} for blob {name}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(body[off:off + nbytes], dtype=dt).reshape(shape).copy()
        off += nbytes
        blobs[name] = arr
    return ModelCheckpoint(config_hash=cfg_hash, seed=int(seed), blobs=blobs)
