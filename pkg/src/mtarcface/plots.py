"""Static training-curve figure from a trainer CSV log."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .trainer import LOG_COLUMNS, read_log  # noqa: E402


class LogSchemaError(ValueError):
    pass


def plot_curves(log_csv_path, out_image_path) -> Path:
    """Render loss, accuracy and learning-rate curves against step."""
    with open(log_csv_path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    for col in LOG_COLUMNS:
        if col not in header:
            raise LogSchemaError(f"{log_csv_path}: missing column {col!r}")
    data = read_log(log_csv_path)
    step = data["step"]

    fig, (ax_loss, ax_acc, ax_lr) = plt.subplots(3, 1, figsize=(7, 9), sharex=True)
    ax_loss.plot(step, data["loss_total"], label="total")
    ax_loss.plot(step, data["loss_arcface"], label="identity (ArcFace)")
    ax_loss.plot(step, data["loss_mask"], label="mask")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    ax_acc.plot(step, data["id_acc"], label="face recognition")
    ax_acc.plot(step, data["mask_acc"], label="mask usage")
    ax_acc.set_ylabel("batch accuracy")
    ax_acc.set_ylim(-0.02, 1.02)
    ax_acc.legend()
    ax_lr.step(step, data["lr"], where="post")
    ax_lr.set_yscale("log")
    ax_lr.set_ylabel("learning rate")
    ax_lr.set_xlabel("training step")
    for ax in (ax_loss, ax_acc, ax_lr):
        ax.grid(alpha=0.3)
    fig.tight_layout()
    out = Path(out_image_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    # no Software/date metadata so reruns are byte-identical
    fig.savefig(out, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return out
