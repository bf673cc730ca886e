"""Dual-head embedding network and the additive angular margin identity head.

The backbone is a small residual convnet (3 stages by default).  After global
pooling and dropout the shared feature feeds two parallel affine heads: the
bias-free embedding layer and a 2-way mask-usage classifier.  The margin head
(:class:`ArcMarginHead`) only exists at training time.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import CheckpointError, DegenerateEmbedding, NotNormalized

COS_EPS = 1e-7
NORM_TOL = 1e-4


@dataclass(frozen=True)
class BackboneConfig:
    input_size: int = 112
    widths: tuple[int, ...] = (16, 32, 64)
    depth: int = 2
    embedding_dim: int = 512
    dropout_rate: float = 0.4

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not self.widths:
            raise ValueError("widths must be non-empty")
        if self.embedding_dim < 2:
            raise ValueError("embedding_dim must be >= 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.input_size < 2 ** len(self.widths):
            raise ValueError(f"input_size {self.input_size} too small for {len(self.widths)} stages")


@dataclass(frozen=True)
class ArcHeadParams:
    num_classes: int
    scale: float = 64.0
    margin: float = 0.5

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if not 0.0 <= self.margin < math.pi / 2:
            raise ValueError("margin must be in [0, pi/2)")


def _norm(channels: int) -> nn.GroupNorm:
    # GroupNorm behaves identically in train and eval mode, unlike BatchNorm.
    groups = max(1, min(8, channels // 4))
    if channels % groups:
        groups = 1
    return nn.GroupNorm(groups, channels)


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int):
        super().__init__()
        self.body = nn.Sequential(
            _norm(in_ch),
            nn.Conv2d(in_ch, out_ch, 3, 1, 1, bias=False),
            _norm(out_ch),
            nn.PReLU(out_ch),
            nn.Conv2d(out_ch, out_ch, 3, stride, 1, bias=False),
            _norm(out_ch),
        )
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride, bias=False), _norm(out_ch))
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        return self.body(x) + self.shortcut(x)


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        w0 = cfg.widths[0]
        self.stem = nn.Sequential(nn.Conv2d(3, w0, 3, 1, 1, bias=False), _norm(w0), nn.PReLU(w0))
        blocks, in_ch = [], w0
        for width in cfg.widths:
            for d in range(cfg.depth):
                blocks.append(ResidualBlock(in_ch, width, 2 if d == 0 else 1))
                in_ch = width
        self.stages = nn.Sequential(*blocks)
        self.out_channels = in_ch

    def forward(self, x):
        return self.stages(self.stem(x)).mean(dim=(2, 3))


class ArcMarginHead(nn.Module):
    """Class-centre matrix ``weight`` of shape (D, C) plus margin settings."""

    def __init__(self, embedding_dim: int, params: ArcHeadParams):
        super().__init__()
        self.params = params
        self.weight = nn.Parameter(torch.empty(embedding_dim, params.num_classes))

    def forward(self, embeddings, labels):
        return arcface_logits(embeddings, self.weight, labels, self.params.scale, self.params.margin)


class MTArcFaceNet(nn.Module):
    def __init__(self, cfg: BackboneConfig, head: ArcHeadParams):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        self.embedding = nn.Linear(self.backbone.out_channels, cfg.embedding_dim, bias=False)
        self.mask_head = nn.Linear(self.backbone.out_channels, 2, bias=True)
        self.arc_head = ArcMarginHead(cfg.embedding_dim, head)

    def features(self, x, train_mode: bool = False, generator: torch.Generator | None = None):
        size = self.cfg.input_size
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != size or x.shape[3] != size:
            raise ValueError(f"expected input of shape (B, 3, {size}, {size}), got {tuple(x.shape)}")
        feat = self.backbone(x)
        rate = self.cfg.dropout_rate
        if train_mode and rate > 0:
            keep = torch.rand(feat.shape, generator=generator, dtype=feat.dtype) >= rate
            feat = feat * keep / (1.0 - rate)
        return feat

    def forward(self, x, train_mode: bool = False, generator: torch.Generator | None = None):
        """Raw embeddings (B, D) and mask logits (B, 2) from one shared feature."""
        feat = self.features(x, train_mode, generator)
        return self.embedding(feat), self.mask_head(feat)

    def weight_matrices(self):
        """Named conv/affine weights subject to weight decay (no biases, norms or PReLU slopes)."""
        for name, module in self.named_modules():
            if isinstance(module, (nn.Conv2d, nn.Linear)):
                yield f"{name}.weight", module.weight
        yield "arc_head.weight", self.arc_head.weight


def build_model(cfg: BackboneConfig, head: ArcHeadParams, seed: int = 0,
                dtype: torch.dtype = torch.float32) -> MTArcFaceNet:
    model = MTArcFaceNet(cfg, head)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_normal_(module.weight, mode="fan_in", nonlinearity="linear", generator=gen)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.GroupNorm):
                module.weight.fill_(1.0)
                module.bias.zero_()
            elif isinstance(module, nn.PReLU):
                module.weight.fill_(0.25)
        for block in model.backbone.stages:
            # residual branches start near identity
            block.body[-1].weight.fill_(0.1)
        w = model.arc_head.weight
        nn.init.normal_(w, generator=gen)
        w.div_(w.norm(dim=0, keepdim=True))
    return model.to(dtype)


def preprocess(pixels) -> torch.Tensor:
    """uint8 (B, H, W, 3) -> float (B, 3, H, W) scaled to [-1, 1]."""
    x = torch.as_tensor(np.ascontiguousarray(pixels))
    return (x.permute(0, 3, 1, 2).to(torch.float32) - 127.5) / 127.5


def normalize_embedding(v):
    """L2-normalize along the last axis; accepts numpy arrays or tensors."""
    if isinstance(v, torch.Tensor):
        norms = v.norm(dim=-1, keepdim=True)
        if bool((norms == 0).any()):
            raise DegenerateEmbedding("cannot normalize a zero embedding")
        return v / norms
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateEmbedding("cannot normalize a zero embedding")
    return v / norms


def arcface_logits(embeddings, weight, labels, scale: float = 64.0, margin: float = 0.5):
    """Scaled cosine logits with additive angular margin on the target class.

    ``embeddings`` (B, D) must already be unit-norm; the columns of ``weight``
    (D, C) are normalized here.  When ``theta_y + m`` would pass pi the target
    logit falls back to ``cos(theta_y) - m * sin(m)`` to stay monotone.
    """
    norms = embeddings.norm(dim=-1)
    if bool(((norms - 1).abs() > NORM_TOL).any()):
        raise NotNormalized(f"embedding norms deviate from 1 by up to {float((norms - 1).abs().max()):.3g}")
    w = weight / weight.norm(dim=0, keepdim=True)
    cos = (embeddings @ w).clamp(-1 + COS_EPS, 1 - COS_EPS)
    labels = torch.as_tensor(labels, dtype=torch.long)
    target = cos.gather(1, labels[:, None])
    sin = torch.sqrt(1.0 - target * target)
    with_margin = target * math.cos(margin) - sin * math.sin(margin)
    fallback = target - margin * math.sin(margin)
    target_logit = torch.where(target > math.cos(math.pi - margin), with_margin, fallback)
    one_hot = F.one_hot(labels, cos.shape[1]).to(torch.bool)
    return scale * torch.where(one_hot, target_logit, cos)


# -- checkpoints -------------------------------------------------------------

_MAGIC = b"MTARCCK1"


@dataclass
class Checkpoint:
    backbone: BackboneConfig
    head: ArcHeadParams
    params: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    seed: int = 0
    step: int = 0
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: MTArcFaceNet, velocity=None, seed=0, step=0, extra=None):
        params = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
        vel = {k: v.detach().cpu().numpy().copy() for k, v in (velocity or {}).items()}
        return cls(model.cfg, model.arc_head.params, params, vel, int(seed), int(step), dict(extra or {}))

    def build(self) -> MTArcFaceNet:
        model = MTArcFaceNet(self.backbone, self.head)
        dtype = next(iter(self.params.values())).dtype
        model = model.to(torch.from_numpy(np.zeros(0, dtype=dtype)).dtype)
        state = {k: torch.from_numpy(v.copy()) for k, v in self.params.items()}
        model.load_state_dict(state, strict=True)
        return model

    def velocity_tensors(self) -> dict[str, torch.Tensor]:
        return {k: torch.from_numpy(v.copy()) for k, v in self.velocity.items()}


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write a self-describing container: magic, JSON header, raw little-endian arrays."""
    entries, blobs, offset = [], [], 0
    for group, arrays in (("params", ckpt.params), ("velocity", ckpt.velocity)):
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name])
            arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = arr.tobytes()
            entries.append({
                "group": group, "name": name, "dtype": arr.dtype.str,
                "shape": list(arr.shape), "offset": offset, "nbytes": len(raw),
            })
            blobs.append(raw)
            offset += len(raw)
    header = {
        "backbone": asdict(ckpt.backbone),
        "head": asdict(ckpt.head),
        "sampler": {"seed": ckpt.seed, "step": ckpt.step},
        "extra": ckpt.extra,
        "tensors": entries,
    }
    head_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(head_bytes)))
        fh.write(head_bytes)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not data.startswith(_MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint file")
    (head_len,) = struct.unpack_from("<Q", data, len(_MAGIC))
    start = len(_MAGIC) + 8
    header = json.loads(data[start:start + head_len].decode("utf-8"))
    body = memoryview(data)[start + head_len:]
    groups = {"params": {}, "velocity": {}}
    for entry in header["tensors"]:
        raw = body[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
        groups[entry["group"]][entry["name"]] = arr
    return Checkpoint(
        backbone=BackboneConfig(**header["backbone"]),
        head=ArcHeadParams(**header["head"]),
        params=groups["params"],
        velocity=groups["velocity"],
        seed=header["sampler"]["seed"],
        step=header["sampler"]["step"],
        extra=header.get("extra", {}),
    )
