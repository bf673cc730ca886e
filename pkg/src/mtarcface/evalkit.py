"""Pair-verification and mask-usage evaluation harnesses."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .datamodel import AlignedFace
from .model import Checkpoint, MTArcFaceNet, load_checkpoint, normalize_embedding, preprocess

NUM_THRESHOLDS = 400
MASK_THRESHOLD = 0.5
THRESHOLDS = np.linspace(-1.0, 1.0, NUM_THRESHOLDS)
RESULT_COLUMNS = ("dataset", "model", "accuracy", "best_threshold", "num_pairs")


@dataclass
class VerificationResult:
    accuracy: float
    best_threshold: float
    num_pairs: int
    per_fold_accuracies: list[float]
    per_fold_thresholds: list[float] = field(default_factory=list)


@dataclass
class MaskUsageResult:
    accuracy: float
    num_faces: int
    threshold: float = MASK_THRESHOLD


def _as_model(checkpoint) -> MTArcFaceNet:
    if isinstance(checkpoint, MTArcFaceNet):
        return checkpoint
    if isinstance(checkpoint, Checkpoint):
        return checkpoint.build()
    return load_checkpoint(checkpoint).build()


def _stack(faces) -> np.ndarray:
    return np.stack([f.pixels if isinstance(f, AlignedFace) else np.asarray(f) for f in faces])


@torch.no_grad()
def run_model(checkpoint, faces, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Inference-mode raw embeddings and mask logits, in input order."""
    model = _as_model(checkpoint)
    pixels = _stack(faces) if len(faces) else np.zeros((0, 1, 1, 3), np.uint8)
    dtype = next(model.parameters()).dtype
    embs, logits = [], []
    for start in range(0, len(pixels), batch_size):
        x = preprocess(pixels[start:start + batch_size]).to(dtype)
        e, m = model(x, train_mode=False)
        embs.append(e.double().numpy())
        logits.append(m.double().numpy())
    if not embs:
        return np.zeros((0, model.cfg.embedding_dim)), np.zeros((0, 2))
    return np.concatenate(embs), np.concatenate(logits)


def embed_all(checkpoint, faces) -> np.ndarray:
    emb, _ = run_model(checkpoint, faces)
    return normalize_embedding(emb) if len(emb) else emb


def pair_similarities(emb_a, emb_b) -> np.ndarray:
    """Cosine similarity of row pairs; inputs are normalized here."""
    a = normalize_embedding(emb_a)
    b = normalize_embedding(emb_b)
    return np.sum(a * b, axis=1)


def _accuracies(sims: np.ndarray, same: np.ndarray) -> np.ndarray:
    # similarity exactly at the threshold counts as "different identity"
    predicted = sims[None, :] > THRESHOLDS[:, None]
    return (predicted == same[None, :]).mean(axis=1)


def verification_from_similarities(sims, same, folds: int = 10) -> VerificationResult:
    """Cross-validated threshold accuracy over contiguous, equal folds."""
    sims = np.asarray(sims, dtype=np.float64)
    same = np.asarray(same, dtype=bool)
    n = len(sims)
    if folds < 2:
        raise ValueError("need at least 2 folds")
    if n < folds or n % folds:
        raise ValueError(f"{n} pairs cannot be split into {folds} equal folds")
    fold_of = np.arange(n) // (n // folds)
    accs, thresholds = [], []
    for k in range(folds):
        test = fold_of == k
        train_acc = _accuracies(sims[~test], same[~test])
        best = int(np.argmax(train_acc))
        t = THRESHOLDS[best]
        accs.append(float(((sims[test] > t) == same[test]).mean()))
        thresholds.append(float(t))
    total = 0.0
    for a in accs:
        total += a
    return VerificationResult(total / folds, float(np.mean(thresholds)), n, accs, thresholds)


def verification_accuracy(pairs, checkpoint, folds: int = 10) -> VerificationResult:
    """Embed every face of ``pairs`` and score them with 10-fold threshold selection."""
    if not pairs:
        raise ValueError("no verification pairs")
    emb_a = embed_all(checkpoint, [p.face_a for p in pairs])
    emb_b = embed_all(checkpoint, [p.face_b for p in pairs])
    same = np.array([p.same_identity for p in pairs], dtype=bool)
    return verification_from_similarities(pair_similarities(emb_a, emb_b), same, folds)


def verification_from_indices(index_pairs, pixels: np.ndarray, checkpoint, folds: int = 10) -> VerificationResult:
    """Like :func:`verification_accuracy` but embeds each distinct image once."""
    model = _as_model(checkpoint)
    index_pairs = list(index_pairs)
    used = sorted({i for a, b, _ in index_pairs for i in (a, b)})
    emb = embed_all(model, pixels[used])
    row = {i: r for r, i in enumerate(used)}
    a = emb[[row[p[0]] for p in index_pairs]]
    b = emb[[row[p[1]] for p in index_pairs]]
    same = np.array([p[2] for p in index_pairs], dtype=bool)
    return verification_from_similarities(pair_similarities(a, b), same, folds)


def masked_probability(logits_mask: np.ndarray) -> np.ndarray:
    """Softmax P(masked) from (B, 2) mask logits, column 1 being 'masked'."""
    z = np.asarray(logits_mask, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e[:, 1] / e.sum(axis=1)


def mask_accuracy_from_logits(logits_mask, flags) -> MaskUsageResult:
    flags = np.asarray(flags, dtype=np.int64)
    predicted = masked_probability(logits_mask) > MASK_THRESHOLD
    correct = predicted == flags.astype(bool)
    return MaskUsageResult(float(correct.mean()) if len(flags) else 0.0, int(len(flags)))


def mask_usage_accuracy(faces, checkpoint) -> MaskUsageResult:
    """``faces`` is a sequence of ``(AlignedFace, mask_flag)``."""
    faces = list(faces)
    _, logits = run_model(checkpoint, [f for f, _ in faces])
    return mask_accuracy_from_logits(logits, [flag for _, flag in faces])


# -- reporting ---------------------------------------------------------------

def results_csv(rows) -> str:
    """``rows`` of ``(dataset, model, VerificationResult)``."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RESULT_COLUMNS)
    for dataset, model, res in rows:
        writer.writerow([dataset, model, repr(res.accuracy), repr(res.best_threshold), res.num_pairs])
    return buf.getvalue()


def read_results_csv(paths) -> list[tuple[str, str, float]]:
    out = []
    for path in paths:
        with open(path, encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            missing = [c for c in ("dataset", "model", "accuracy") if c not in (reader.fieldnames or [])]
            if missing:
                raise ValueError(f"{path}: missing column(s) {', '.join(missing)}")
            out.extend((r["dataset"], r["model"], float(r["accuracy"])) for r in reader)
    return out


@dataclass
class ComparisonTable:
    rows: list[tuple[str, float, float, float]]
    proposed_name: str = "Proposed Method"
    baseline_name: str = "Original model"

    def to_text(self) -> str:
        header = ("Dataset", self.proposed_name, self.baseline_name, "Delta")
        body = [(d, f"{p:.2f}", f"{b:.2f}", f"{delta:+.2f}") for d, p, b, delta in self.rows]
        widths = [max(len(r[i]) for r in [header, *body]) for i in range(4)]
        fmt = lambda r: " | ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
        rule = "-+-".join("-" * w for w in widths)
        return "\n".join([fmt(header), rule, *map(fmt, body)]) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["dataset", "proposed", "baseline", "delta"])
        for d, p, b, delta in self.rows:
            writer.writerow([d, f"{p:.2f}", f"{b:.2f}", f"{delta:+.2f}"])
        return buf.getvalue()


def compare_models(proposed, baseline, proposed_name: str = "Proposed Method",
                   baseline_name: str = "Original model", percent: bool = False) -> ComparisonTable:
    """Two-model accuracy table with deltas.

    ``proposed`` and ``baseline`` are sequences of ``(dataset, accuracy)`` where
    accuracy is a float or a :class:`VerificationResult`.  Accuracies in [0, 1]
    are shown as percentages unless ``percent`` says they already are.
    """
    def acc(v):
        v = v.accuracy if isinstance(v, VerificationResult) else float(v)
        return v if percent else 100.0 * v

    proposed, baseline = list(proposed), list(baseline)
    names_p = [d for d, _ in proposed]
    names_b = [d for d, _ in baseline]
    if names_p != names_b:
        raise ValueError(f"dataset lists differ: {names_p} vs {names_b}")
    rows = []
    for (d, p), (_, b) in zip(proposed, baseline):
        ap, ab = acc(p), acc(b)
        # round before differencing so the delta matches the printed columns
        rows.append((d, ap, ab, round(round(ap, 2) - round(ab, 2), 2)))
    return ComparisonTable(rows, proposed_name, baseline_name)


def write_comparison(table: ComparisonTable, out_path) -> tuple[Path, Path]:
    out = Path(out_path)
    text_path = out.with_suffix(".txt")
    csv_path = out.with_suffix(".csv")
    text_path.write_text(table.to_text(), encoding="utf-8")
    csv_path.write_text(table.to_csv(), encoding="utf-8")
    return text_path, csv_path
