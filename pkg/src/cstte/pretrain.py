"""Contrastive pretraining: InfoNCE loss, epoch loop, early stop, checkpoints.

One positive pair per trajectory per epoch; negatives are other pairs'
queries/positives from the same batch. All randomness derives from
SeedSequence streams keyed by (seed, purpose, epoch), so a fixed seed
reproduces runs bit-exactly.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from cstte import encoder as enc
from cstte.augment import SamplePair, assign_negatives, get_sampler
from cstte.errors import ConfigError, DataError
from cstte.numcore import (
    AdamState,
    DiffArray,
    Tape,
    adam_step,
    backward,
    dot,
    l2_normalize,
    logsumexp,
    pick,
    read_arrays,
    recording,
    scale,
    stack_scalars,
    sub,
    sum_all,
    write_arrays,
)
from cstte.trajdata import Normalization, Trajectory

log = logging.getLogger(__name__)

# purpose tags for SeedSequence streams
_SEED_INIT = 0
_SEED_SHUFFLE = 1
_SEED_AUGMENT = 2
_SEED_NEGATIVES = 3
_SEED_VALIDATION = 4

TRAIN_LOG_HEADER = "epoch,train_loss,val_loss,seconds"


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    n_neg: int = 2
    temperature: float = 0.07
    learning_rate: float = 0.001
    max_epochs: int = 50
    patience: int = 5
    seed: int = 42
    augmentation: str = "two_hop"
    keep_prob: float = 0.5
    cosine: bool = False

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.n_neg < 1:
            raise ConfigError(f"n_neg must be >= 1, got {self.n_neg}")
        if self.n_neg > 2 * (self.batch_size - 1):
            raise ConfigError(
                f"n_neg={self.n_neg} cannot be served by batches of {self.batch_size}"
            )
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "n_neg": self.n_neg,
            "temperature": self.temperature,
            "learning_rate": self.learning_rate,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "seed": self.seed,
            "augmentation": self.augmentation,
            "keep_prob": self.keep_prob,
            "cosine": self.cosine,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def info_nce(
    query: DiffArray,
    positive: DiffArray,
    negatives: Sequence[DiffArray],
    temperature: float,
    cosine: bool = False,
) -> DiffArray:
    """-log softmax of the positive among {positive} + negatives, scaled by 1/T."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    if cosine:
        query = l2_normalize(query)
        positive = l2_normalize(positive)
        negatives = [l2_normalize(k) for k in negatives]
    logits = stack_scalars([dot(query, positive)] + [dot(query, k) for k in negatives])
    logits = scale(logits, 1.0 / temperature)
    return sub(logsumexp(logits), pick(logits, 0))


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float

    def log_line(self) -> str:
        return f"{self.epoch},{self.train_loss!r},{self.val_loss!r},{self.seconds:.3f}"


@dataclass
class Checkpoint:
    """Best-epoch snapshot: everything needed to embed and to resume."""

    encoder_config: enc.EncoderConfig
    train_config: TrainConfig
    params: dict[str, np.ndarray]
    adam_first: dict[str, np.ndarray]
    adam_second: dict[str, np.ndarray]
    adam_step_count: int
    normalization: Normalization
    epoch: int
    val_loss: float


def _stream(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, tags)]))


def batch_loss(
    params: enc.ParamSet,
    config: enc.EncoderConfig,
    pairs: list[SamplePair],
    negative_refs: list[list[tuple[int, int]]],
    train_config: TrainConfig,
) -> DiffArray:
    query_embs = [enc.encode_trajectory(params, config, p.query) for p in pairs]
    pos_embs = [enc.encode_trajectory(params, config, p.positive) for p in pairs]
    sides = (query_embs, pos_embs)
    losses = []
    for i in range(len(pairs)):
        negs = [sides[side][j] for j, side in negative_refs[i]]
        losses.append(
            info_nce(
                query_embs[i],
                pos_embs[i],
                negs,
                train_config.temperature,
                cosine=train_config.cosine,
            )
        )
    return scale(sum_all(stack_scalars(losses)), 1.0 / len(losses))


def _min_batch_pairs(n_neg: int) -> int:
    # a batch of B pairs offers 2*(B-1) negatives per pair
    return max(2, n_neg // 2 + 1 + (n_neg % 2 > 0))


def _epoch_batches(
    trajs: Sequence[Trajectory],
    order: np.ndarray,
    sampler,
    aug_rng: np.random.Generator,
    batch_size: int,
    min_pairs: int,
) -> list[list[SamplePair]]:
    batches: list[list[SamplePair]] = []
    for start in range(0, len(order), batch_size):
        chunk = order[start : start + batch_size]
        pairs = []
        for pos in chunk:
            pair = sampler(trajs[int(pos)], aug_rng)
            if pair is not None:
                pairs.append(pair)
        if len(pairs) >= min_pairs:
            batches.append(pairs)
    return batches


def _forward_loss_value(
    params: enc.ParamSet,
    config: enc.EncoderConfig,
    batches: list[list[SamplePair]],
    neg_rng: np.random.Generator,
    train_config: TrainConfig,
) -> float:
    total, count = 0.0, 0
    for pairs in batches:
        refs = assign_negatives(len(pairs), train_config.n_neg, neg_rng)
        loss = batch_loss(params, config, pairs, refs, train_config)
        total += float(loss.data) * len(pairs)
        count += len(pairs)
    if count == 0:
        raise DataError("no usable pairs for loss evaluation")
    return total / count


def train(
    train_trajs: Sequence[Trajectory],
    val_trajs: Sequence[Trajectory],
    encoder_config: enc.EncoderConfig,
    train_config: TrainConfig,
    normalization: Normalization,
    on_epoch: Optional[Callable[[EpochStats], None]] = None,
) -> tuple[Checkpoint, list[EpochStats]]:
    """Early-stopped contrastive fit; returns the best-validation checkpoint.

    `train_trajs`/`val_trajs` must already be normalized (times in minutes);
    `normalization` is recorded in the checkpoint so raw data can be embedded
    later.
    """
    if not train_trajs or not val_trajs:
        raise DataError("training requires non-empty train and validation splits")
    sampler = get_sampler(train_config.augmentation, train_config.keep_prob)
    seed = train_config.seed
    params = enc.init_params(encoder_config, _stream(seed, _SEED_INIT))
    adam = AdamState(params, learning_rate=train_config.learning_rate)
    min_pairs = _min_batch_pairs(train_config.n_neg)

    best: Optional[Checkpoint] = None
    history: list[EpochStats] = []
    epochs_since_best = 0
    for epoch in range(1, train_config.max_epochs + 1):
        t_start = time.perf_counter()
        order = _stream(seed, _SEED_SHUFFLE, epoch).permutation(len(train_trajs))
        batches = _epoch_batches(
            train_trajs,
            order,
            sampler,
            _stream(seed, _SEED_AUGMENT, epoch),
            train_config.batch_size,
            min_pairs,
        )
        if not batches:
            raise DataError("no trainable batches; trajectories too short for the sampler")
        neg_rng = _stream(seed, _SEED_NEGATIVES, epoch)
        total, count = 0.0, 0
        for pairs in batches:
            refs = assign_negatives(len(pairs), train_config.n_neg, neg_rng)
            tape = Tape()
            with recording(tape):
                loss = batch_loss(params, encoder_config, pairs, refs, train_config)
            backward(tape, loss)
            adam_step(params, adam)
            total += float(loss.data) * len(pairs)
            count += len(pairs)
        train_loss = total / count

        val_batches = _epoch_batches(
            val_trajs,
            np.arange(len(val_trajs)),
            sampler,
            _stream(seed, _SEED_VALIDATION),
            train_config.batch_size,
            min_pairs,
        )
        if not val_batches:
            raise DataError("validation split yields no usable pairs")
        val_loss = _forward_loss_value(
            params,
            encoder_config,
            val_batches,
            _stream(seed, _SEED_VALIDATION, 1),
            train_config,
        )
        stats = EpochStats(epoch, train_loss, val_loss, time.perf_counter() - t_start)
        history.append(stats)
        if on_epoch is not None:
            on_epoch(stats)

        if best is None or val_loss < best.val_loss:
            best = Checkpoint(
                encoder_config=encoder_config,
                train_config=train_config,
                params={k: v.data.copy() for k, v in params.items()},
                adam_first={k: v.copy() for k, v in adam.first_moment.items()},
                adam_second={k: v.copy() for k, v in adam.second_moment.items()},
                adam_step_count=adam.step_count,
                normalization=normalization,
                epoch=epoch,
                val_loss=val_loss,
            )
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= train_config.patience:
                break
    assert best is not None
    return best, history


# ---------------------------------------------------------------------------
# checkpoint files
# ---------------------------------------------------------------------------

_OPT_FIRST = "optim.m."
_OPT_SECOND = "optim.v."
_OPT_STEP = "optim.step"


def checkpoint_meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays: dict[str, np.ndarray] = dict(ckpt.params)
    for name, arr in ckpt.adam_first.items():
        arrays[_OPT_FIRST + name] = arr
    for name, arr in ckpt.adam_second.items():
        arrays[_OPT_SECOND + name] = arr
    arrays[_OPT_STEP] = np.array([float(ckpt.adam_step_count)])
    write_arrays(path, arrays)
    meta = {
        "encoder_config": ckpt.encoder_config.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "normalization": ckpt.normalization.to_dict(),
        "epoch": ckpt.epoch,
        "val_loss": ckpt.val_loss,
    }
    with open(checkpoint_meta_path(path), "w") as fh:
        json.dump(meta, fh, indent=1)
        fh.write("\n")


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    meta_path = checkpoint_meta_path(path)
    if not meta_path.exists():
        raise DataError(f"checkpoint metadata not found: {meta_path}")
    with open(meta_path) as fh:
        meta = json.load(fh)
    arrays = read_arrays(path)
    params, first, second = {}, {}, {}
    step_count = 0
    for name, arr in arrays.items():
        if name == _OPT_STEP:
            step_count = int(arr[0])
        elif name.startswith(_OPT_FIRST):
            first[name[len(_OPT_FIRST) :]] = arr
        elif name.startswith(_OPT_SECOND):
            second[name[len(_OPT_SECOND) :]] = arr
        else:
            params[name] = arr
    return Checkpoint(
        encoder_config=enc.EncoderConfig.from_dict(meta["encoder_config"]),
        train_config=TrainConfig.from_dict(meta["train_config"]),
        params=params,
        adam_first=first,
        adam_second=second,
        adam_step_count=step_count,
        normalization=Normalization.from_dict(meta["normalization"]),
        epoch=int(meta["epoch"]),
        val_loss=float(meta["val_loss"]),
    )


# ---------------------------------------------------------------------------
# embedding export
# ---------------------------------------------------------------------------


def embed_dataset(ckpt: Checkpoint, trajs: Sequence[Trajectory]) -> dict[str, np.ndarray]:
    """Frozen-encoder embeddings for raw (unnormalized) trajectories."""
    params = enc.params_from_arrays(ckpt.params)
    out: dict[str, np.ndarray] = {}
    for traj in trajs:
        normalized = ckpt.normalization.apply(traj)
        out[traj.traj_id] = enc.encode_trajectory(params, ckpt.encoder_config, normalized).data
    return out


def write_embeddings_csv(path, embeddings: dict[str, np.ndarray]) -> None:
    path = Path(path)
    ids = sorted(embeddings)
    if not ids:
        raise DataError("no embeddings to write")
    dim = embeddings[ids[0]].shape[0]
    with open(path, "w") as fh:
        fh.write("traj_id," + ",".join(f"e_{i}" for i in range(dim)) + "\n")
        for traj_id in ids:
            vec = embeddings[traj_id]
            fh.write(traj_id + "," + ",".join(repr(float(x)) for x in vec) + "\n")


def write_embeddings_container(path, embeddings: dict[str, np.ndarray]) -> None:
    write_arrays(path, {traj_id: embeddings[traj_id] for traj_id in sorted(embeddings)})


def read_embeddings_container(path) -> dict[str, np.ndarray]:
    return read_arrays(path)
