"""SGD training loop over the twin datasets, with checkpoints and a CSV log."""
from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch

from .datamodel import DatasetManifest, validate_twins
from .errors import ConfigError, NonFiniteGradient
from .loss import arcface_loss, mask_loss, total_loss
from .model import (
    ArcHeadParams,
    BackboneConfig,
    Checkpoint,
    build_model,
    load_checkpoint,
    normalize_embedding,
    preprocess,
    save_checkpoint,
)
from .sampler import SamplerConfig, batch_plan

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "lr", "loss_total", "loss_arcface", "loss_mask", "id_acc", "mask_acc")
_DROPOUT_TAG = 0xD0


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 2000
    batch_size: int = 64
    base_lr: float = 0.005
    momentum: float = 0.9
    lr_decay_factor: float = 0.3
    lr_decay_steps: tuple[int, ...] = (1200, 1600)
    weight_decay: float = 5e-4
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 500
    masked_probability: float = 0.5
    mask_loss_weight: float = 1.0
    widths: tuple[int, ...] = (16, 32, 64)
    depth: int = 2
    embedding_dim: int = 512
    dropout_rate: float = 0.4
    scale: float = 64.0
    margin: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "lr_decay_steps", tuple(int(s) for s in self.lr_decay_steps))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        steps = self.lr_decay_steps
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ConfigError("lr_decay_steps must be strictly increasing")
        if steps and steps[-1] >= self.total_steps:
            raise ConfigError("lr_decay_steps must be < total_steps")
        if not 0 < self.lr_decay_factor < 1:
            raise ConfigError("lr_decay_factor must be in (0, 1)")
        if self.total_steps < 1 or self.batch_size < 1:
            raise ConfigError("total_steps and batch_size must be >= 1")
        if self.log_every < 1 or self.checkpoint_every < 1:
            raise ConfigError("log_every and checkpoint_every must be >= 1")
        if not 0.0 <= self.masked_probability <= 1.0:
            raise ConfigError("masked_probability must be in [0, 1]")

    def backbone(self, input_size: int) -> BackboneConfig:
        return BackboneConfig(input_size, self.widths, self.depth, self.embedding_dim, self.dropout_rate)

    def head(self, num_classes: int) -> ArcHeadParams:
        return ArcHeadParams(num_classes, self.scale, self.margin)


def full_scale_config(**overrides) -> TrainConfig:
    """The full-scale schedule: batch 512, 300k steps, lr 0.0015 decayed x0.3 at 120k/200k/280k."""
    base = dict(
        total_steps=300_000, batch_size=512, base_lr=0.0015, momentum=0.9,
        lr_decay_factor=0.3, lr_decay_steps=(120_000, 200_000, 280_000),
    )
    base.update(overrides)
    return TrainConfig(**base)


def baseline_config(cfg: TrainConfig) -> TrainConfig:
    """ArcFace-only variant: no masked samples and no mask-loss term."""
    return dataclasses.replace(cfg, masked_probability=0.0, mask_loss_weight=0.0)


# -- config files ------------------------------------------------------------

_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _convert(key: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind in ("tuple[int, ...]",):
            return tuple(int(t) for t in raw.replace(",", " ").split())
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def coerce_config_values(values: dict[str, str]) -> dict:
    """Type raw string values per :class:`TrainConfig`; unknown keys are rejected."""
    out = {}
    for key, raw in values.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _convert(key, raw, _FIELDS[key].type)
    return out


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        values[key] = value
    return values


def format_config(cfg: TrainConfig, extra: dict | None = None) -> str:
    lines = []
    for key, value in {**(extra or {}), **dataclasses.asdict(cfg)}.items():
        if isinstance(value, (tuple, list)):
            value = ", ".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def load_config(path, overrides: dict[str, str] | None = None) -> TrainConfig:
    values = parse_config_text(Path(path).read_text(encoding="utf-8"), str(path))
    values.update(overrides or {})
    return TrainConfig(**coerce_config_values(values))


# -- schedule and update -----------------------------------------------------

def lr_at(step: int, cfg: TrainConfig) -> float:
    """Staircase schedule ``base_lr * factor**k``, k = decay steps already reached.

    Evaluated in exact decimal arithmetic so the result is the float closest to
    the true product of the configured constants.
    """
    if not 0 <= step < cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps})")
    k = sum(1 for s in cfg.lr_decay_steps if s <= step)
    return float(Fraction(repr(cfg.base_lr)) * Fraction(repr(cfg.lr_decay_factor)) ** k)


def sgd_step(params: dict, grads: dict, velocity: dict, lr: float, momentum: float):
    """Classical momentum: ``v = momentum * v + g``; ``p = p - lr * v`` (in place)."""
    for name, g in grads.items():
        if not bool(torch.isfinite(g).all()):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name}", parameter_name=name)
    with torch.no_grad():
        for name, p in params.items():
            v = velocity[name]
            v.mul_(momentum).add_(grads[name])
            p.sub_(lr * v)
    return params, velocity


# -- training ----------------------------------------------------------------

@dataclass
class TrainResult:
    final_checkpoint: Path
    log_path: Path
    checkpoints: list[Path] = field(default_factory=list)


def _dropout_generator(seed: int, step: int) -> torch.Generator:
    key = np.random.SeedSequence([_DROPOUT_TAG, int(seed), int(step)]).generate_state(1, np.uint64)[0]
    return torch.Generator().manual_seed(int(key))


def _format_row(row) -> str:
    return ",".join(str(v) if isinstance(v, int) else repr(float(v)) for v in row)


def _read_log_prefix(path: Path, before_step: int) -> list[str]:
    if not path.exists():
        return []
    lines = path.read_text(encoding="utf-8").splitlines()[1:]
    return [ln for ln in lines if ln and int(ln.split(",", 1)[0]) < before_step]


def batch_objective(model, cfg: TrainConfig, x, labels, flags, generator=None, train_mode=True):
    """Forward pass and full loss breakdown for one batch."""
    emb_raw, logits_mask = model(x, train_mode=train_mode, generator=generator)
    emb = normalize_embedding(emb_raw)
    logits_id = model.arc_head(emb, labels)
    breakdown = total_loss(
        arcface_loss(logits_id, labels),
        mask_loss(logits_mask, flags),
        list(dict(model.weight_matrices()).values()),
        cfg.weight_decay,
        cfg.mask_loss_weight,
    )
    return breakdown, logits_id, logits_mask


def train(cfg: TrainConfig, original: DatasetManifest, masked: DatasetManifest, out_dir,
          resume=None, threads: int = 1, init_seed: int | None = None) -> TrainResult:
    """Run the full pipeline and write ``train_log.csv`` plus checkpoints to ``out_dir``."""
    validate_twins(original, masked)
    torch.set_num_threads(int(threads))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.csv"

    orig_px = original.load_pixels()
    masked_px = masked.load_pixels()
    labels_all = np.asarray(original.labels, dtype=np.int64)
    size = orig_px.shape[1]
    init_seed = cfg.seed if init_seed is None else int(init_seed)
    cfg_record = {**dataclasses.asdict(cfg), "init_seed": init_seed, "num_images": original.num_images}

    model = build_model(cfg.backbone(size), cfg.head(original.num_identities), seed=init_seed)
    params = dict(model.named_parameters())
    velocity = {k: torch.zeros_like(v) for k, v in params.items()}
    start = 0
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.extra.get("train_config") != _jsonable(cfg_record):
            raise ConfigError(f"checkpoint {resume} was written with a different training config")
        with torch.no_grad():
            state = ckpt.build().state_dict()
            model.load_state_dict(state)
            for k, v in ckpt.velocity_tensors().items():
                velocity[k].copy_(v)
        start = ckpt.step

    sampler = SamplerConfig(cfg.seed, cfg.batch_size, original.num_images, cfg.masked_probability)
    prefix = _read_log_prefix(log_path, start) if start else []
    fh = open(log_path, "w", encoding="utf-8", newline="")
    fh.write(",".join(LOG_COLUMNS) + "\n")
    for line in prefix:
        fh.write(line + "\n")

    checkpoints = []
    try:
        for step in range(start, cfg.total_steps):
            idx, flags = batch_plan(sampler, step)
            px = np.where(flags[:, None, None, None].astype(bool), masked_px[idx], orig_px[idx])
            x = preprocess(px)
            labels = torch.from_numpy(labels_all[idx])
            flags_t = torch.from_numpy(flags)
            breakdown, logits_id, logits_mask = batch_objective(
                model, cfg, x, labels, flags_t, generator=_dropout_generator(cfg.seed, step)
            )
            for p in params.values():
                p.grad = None
            breakdown.loss_total.backward()
            lr = lr_at(step, cfg)
            if step % cfg.log_every == 0:
                values = breakdown.as_floats()
                id_acc = float((logits_id.argmax(1) == labels).double().mean())
                mask_acc = float((logits_mask.argmax(1) == flags_t).double().mean())
                fh.write(_format_row((step, lr, values["loss_total"], values["loss_arcface"],
                                      values["loss_mask"], id_acc, mask_acc)) + "\n")
                fh.flush()
                log.debug("step %d loss %.4f id_acc %.3f", step, values["loss_total"], id_acc)
            grads = {k: p.grad for k, p in params.items()}
            for k, p in params.items():
                if p.grad is None:
                    grads[k] = torch.zeros_like(p)
            sgd_step(params, grads, velocity, lr, cfg.momentum)
            done = step + 1
            if done % cfg.checkpoint_every == 0 or done == cfg.total_steps:
                path = out / f"ckpt_{done:06d}.ckpt"
                _save(path, model, velocity, cfg.seed, done, cfg_record)
                checkpoints.append(path)
    finally:
        fh.close()
    final = out / "final.ckpt"
    _save(final, model, velocity, cfg.seed, cfg.total_steps, cfg_record)
    return TrainResult(final, log_path, checkpoints)


def _jsonable(record: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in record.items()}


def _save(path, model, velocity, seed, step, cfg_record):
    ckpt = Checkpoint.from_model(model, velocity, seed=seed, step=step,
                                 extra={"train_config": _jsonable(cfg_record)})
    save_checkpoint(path, ckpt)


def read_log(path) -> dict[str, np.ndarray]:
    """Columns of a training log as float arrays."""
    with open(path, encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        names = reader.fieldnames or []
    return {name: np.array([float(r[name]) for r in rows]) for name in names}

