"""Optimization loop: warmup + cosine schedule, AdamW, clipping,
checkpointing, and deterministic batching.

Every batch is derived from ``default_rng([seed, step])``, so resuming
from any step reproduces the exact remaining trajectory without
replaying the stream.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import encoding
from .errors import ConfigError, DataError
from .midi import Piece, augment_pitch
from .model import CompoundModel, TeacherForcedLoss
from .optim import AdamW, clip_global_norm
from .vocab import FeatureVocab, IGNORE_INDEX, PAD_INDEX


@dataclass
class TrainConfig:
    steps: int = 100_000
    batch_size: int = 8
    warmup_steps: int = 2000
    lr_max: float = 1e-4
    lr_min: float | None = None          # defaults to lr_max / 10
    beta1: float = 0.9
    beta2: float = 0.95
    clip: float = 1.0
    weight_decay: float = 0.01
    dropout: float = 0.1
    seed: int = 0
    validate_every: int = 500
    checkpoint_every: int = 2000
    segment_length: int | None = None    # defaults by scheme
    augment: bool = True
    max_valid_segments: int = 64

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 <= self.warmup_steps < self.steps:
            raise ConfigError(
                f"warmup_steps {self.warmup_steps} must be < steps {self.steps}"
            )
        if self.lr_min is None:
            self.lr_min = self.lr_max / 10.0

    def to_dict(self) -> dict:
        return {k: v for k, v in vars(self).items()}


def segment_length_default(scheme_name: str) -> int:
    """Flat tokens get twice the window of compound tokens, approximating
    an equal amount of musical context."""
    return 1024 if scheme_name == "remi" else 512


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Linear warmup 0 -> lr_max, then cosine decay lr_max -> lr_min."""
    if step < config.warmup_steps:
        return config.lr_max * step / config.warmup_steps
    if step > config.steps:
        return config.lr_min
    span = config.steps - config.warmup_steps
    progress = (step - config.warmup_steps) / span
    return config.lr_min + 0.5 * (config.lr_max - config.lr_min) * (
        1.0 + math.cos(math.pi * progress)
    )


# ---------------------------------------------------------------------------
# Segment sources


class PieceSegmentSource:
    """Draws token sequences from pieces, re-encoding per draw so pitch
    augmentation (uniform on [-5, 6]) varies per segment."""

    def __init__(self, pieces: list[Piece], vocab: FeatureVocab,
                 scheme_name: str, augment: bool = True):
        if not pieces:
            raise DataError("empty piece split")
        self.pieces = pieces
        self.vocab = vocab
        self.scheme_name = scheme_name
        self.augment = augment
        self.scheme = encoding.scheme_for(scheme_name, vocab)

    def __len__(self) -> int:
        return len(self.pieces)

    def tokens(self, index: int, rng: np.random.Generator) -> np.ndarray:
        piece = self.pieces[index]
        if self.augment:
            shift = int(rng.integers(-5, 7))
            piece = augment_pitch(piece, shift)
        return encoding.encode(piece, self.vocab, self.scheme_name).tokens

    def eval_tokens(self, index: int) -> np.ndarray:
        return encoding.encode(
            self.pieces[index], self.vocab, self.scheme_name
        ).tokens


class TokenSegmentSource:
    """Pre-encoded sequences (synthetic corpora, cached encodings)."""

    def __init__(self, sequences: list[np.ndarray], scheme: encoding.SchemeSpec):
        if not sequences:
            raise DataError("empty sequence split")
        self.sequences = [np.asarray(s, dtype=np.int32) for s in sequences]
        self.scheme = scheme

    def __len__(self) -> int:
        return len(self.sequences)

    def tokens(self, index: int, rng: np.random.Generator) -> np.ndarray:
        return self.sequences[index]

    def eval_tokens(self, index: int) -> np.ndarray:
        return self.sequences[index]


def _crop_or_pad(tokens: np.ndarray, length: int,
                 rng: np.random.Generator) -> np.ndarray:
    t, width = tokens.shape
    if t > length:
        start = int(rng.integers(0, t - length + 1))
        return tokens[start : start + length]
    if t < length:
        pad = np.full((length - t, width), PAD_INDEX, dtype=tokens.dtype)
        return np.concatenate([tokens, pad], axis=0)
    return tokens


def batch_for_step(source, config: TrainConfig, segment_length: int,
                   step: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic batch for one step: (tokens [B,T,F], loss mask)."""
    rng = np.random.default_rng([config.seed, step])
    rows = []
    for _ in range(config.batch_size):
        index = int(rng.integers(0, len(source)))
        rows.append(_crop_or_pad(source.tokens(index, rng), segment_length, rng))
    tokens = np.stack(rows)
    loss_mask = (tokens != IGNORE_INDEX) & (tokens != PAD_INDEX).any(
        axis=-1, keepdims=True
    )
    return tokens, loss_mask


def make_batches(source, config: TrainConfig, segment_length: int,
                 start_step: int = 0):
    """Endless deterministic batch stream starting at ``start_step``."""
    step = start_step
    while True:
        yield (step, *batch_for_step(source, config, segment_length, step))
        step += 1


def validation_segments(source, segment_length: int,
                        max_segments: int) -> tuple[np.ndarray, np.ndarray]:
    """Fixed evaluation set: consecutive windows over every sequence."""
    rng = np.random.default_rng(0)  # only used to satisfy _crop_or_pad
    rows = []
    for index in range(len(source)):
        tokens = source.eval_tokens(index)
        for start in range(0, len(tokens), segment_length):
            window = tokens[start : start + segment_length]
            if len(window) < 2:
                continue
            rows.append(_crop_or_pad(window, segment_length, rng))
            if len(rows) >= max_segments:
                break
        if len(rows) >= max_segments:
            break
    tokens = np.stack(rows)
    loss_mask = (tokens != IGNORE_INDEX) & (tokens != PAD_INDEX).any(
        axis=-1, keepdims=True
    )
    return tokens, loss_mask


# ---------------------------------------------------------------------------
# The loop


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_step: int = -1
    best_valid_nll: float = math.inf
    best_state: dict | None = None
    final_valid_nll: float = math.inf
    parameter_count: int = 0

    def write_csv(self, path: str | Path) -> None:
        features = sorted(
            {k for row in self.history for k in row if k.startswith("nll/")}
        )
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "split", "mean_nll"] + features)
            for row in self.history:
                writer.writerow(
                    [row["step"], row["split"], f"{row['mean_nll']:.6f}"]
                    + [f"{row.get(f, float('nan')):.6f}" for f in features]
                )


def _snapshot(model: CompoundModel) -> dict:
    return {name: p.data.copy() for name, p in model.named_parameters()}


def restore_snapshot(model: CompoundModel, state: dict) -> None:
    for name, p in model.named_parameters():
        p.data = state[name].copy()


def _evaluate(model: CompoundModel, tokens: np.ndarray,
              loss_mask: np.ndarray) -> TeacherForcedLoss:
    batches = max(1, len(tokens) // 8)
    per_feature_nll: dict[str, float] = {}
    per_feature_count: dict[str, int] = {}
    for chunk in range(batches):
        lo = chunk * 8
        hi = min(len(tokens), lo + 8)
        out = model.forward_teacher_forced(tokens[lo:hi], loss_mask[lo:hi])
        for name in out.per_feature_nll:
            per_feature_nll[name] = (
                per_feature_nll.get(name, 0.0) + out.per_feature_nll[name]
            )
            per_feature_count[name] = (
                per_feature_count.get(name, 0) + out.per_feature_count[name]
            )
    return TeacherForcedLoss(out.loss, per_feature_nll, per_feature_count)


def train(
    model: CompoundModel,
    config: TrainConfig,
    train_source,
    valid_source=None,
    out_dir: str | Path | None = None,
    log=lambda msg: None,
    start_step: int = 0,
    stop_step: int | None = None,
) -> TrainResult:
    """Run the schedule from ``start_step``; keeps the best-validation
    parameter snapshot.

    Batches are a pure function of (seed, step), so resuming a loaded
    checkpoint at its saved step reproduces the identical remaining
    trajectory. No early stopping: overfitting control is the model's
    dropout rate. A non-finite training loss aborts with the offending
    step in the message.
    """
    segment_length = config.segment_length or segment_length_default(
        train_source.scheme.name
    )
    params = model.parameters()
    optimizer = AdamW(params, config.beta1, config.beta2,
                      weight_decay=config.weight_decay)
    result = TrainResult(parameter_count=model.num_parameters())
    log(f"parameters: {result.parameter_count:,}")

    valid_batch = None
    if valid_source is not None:
        valid_batch = validation_segments(
            valid_source, segment_length, config.max_valid_segments
        )

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    def run_validation(step: int) -> float:
        out = _evaluate(model, *valid_batch)
        row = {"step": step, "split": "valid", "mean_nll": out.mean}
        row.update({f"nll/{k}": v for k, v in out.feature_means().items()})
        result.history.append(row)
        if out.mean < result.best_valid_nll:
            result.best_valid_nll = out.mean
            result.best_step = step
            result.best_state = _snapshot(model)
            if out_dir is not None:
                model.save(out_dir / "best.npz", extra_meta={"step": step})
        result.final_valid_nll = out.mean
        return out.mean

    last_step = config.steps if stop_step is None else min(stop_step, config.steps)
    for step in range(start_step, last_step):
        tokens, loss_mask = batch_for_step(
            train_source, config, segment_length, step
        )
        dropout_rng = np.random.default_rng([config.seed, step, 1])
        optimizer.zero_grad()
        out = model.forward_teacher_forced(
            tokens, loss_mask, train=True, rng=dropout_rng
        )
        if not np.isfinite(out.loss.data):
            raise DataError(f"non-finite training loss at step {step}")
        out.loss.backward()
        clip_global_norm(params, config.clip)
        optimizer.step(lr_schedule(step, config))

        if step % 50 == 0 or step == last_step - 1:
            row = {"step": step, "split": "train", "mean_nll": out.mean}
            row.update({f"nll/{k}": v for k, v in out.feature_means().items()})
            result.history.append(row)
        if step % 200 == 0:
            log(f"step {step}: train nll {out.mean:.4f}")
        if valid_batch is not None and (
            (step + 1) % config.validate_every == 0 or step == last_step - 1
        ):
            nll = run_validation(step + 1)
            log(f"step {step + 1}: valid nll {nll:.4f}")
        if out_dir is not None and (step + 1) % config.checkpoint_every == 0:
            model.save(out_dir / "last.npz", extra_meta={"step": step + 1})

    if valid_batch is not None and result.best_state is None:
        run_validation(last_step)
    if out_dir is not None:
        model.save(out_dir / "last.npz", extra_meta={"step": last_step})
        result.write_csv(out_dir / "loss_curves.csv")
    return result
