"""Downstream evaluation: similar-trajectory search, destination prediction,
the Acc@N / macro-F1 metrics, and the DTW, Markov-chain, and Mean baselines.

Search protocol: every test trajectory is split into its odd-position
records (query side) and even-position records (candidate side). Queries
are ranked against all candidates; the true mate is the candidate with the
same id. Macro-F1 for search treats top-1 retrieval as classification over
candidate identities.

Destination protocol: each trajectory is embedded without its last record
and a linear head predicts the last record's location index.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numba import njit

import cstte.encoder as enc
import cstte.numcore as nc
from cstte.errors import ConfigError, DataError
from cstte.pretrain import Checkpoint, _stream
from cstte.trajdata import Trajectory

ACC_LEVELS = (1, 5, 10, 20)

_SEED_HEAD_INIT = 10
_SEED_HEAD_SHUFFLE = 11
_SEED_MEAN_INIT = 12

Embedder = Callable[[Trajectory], np.ndarray]


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalMetrics:
    """Acc@N at the standard cutoffs plus macro-F1, all in [0, 1]."""

    acc_at: dict[int, float]
    macro_f1: float

    def as_key_values(self) -> list[tuple[str, float]]:
        items = [(f"acc_at_{n}", self.acc_at[n]) for n in sorted(self.acc_at)]
        items.append(("macro_f1", self.macro_f1))
        return items


def acc_at_from_ranks(ranks, levels=ACC_LEVELS) -> dict[int, float]:
    """Fraction of queries whose true answer ranks within each cutoff.

    `ranks` holds the 1-indexed rank of the true answer per query.
    """
    ranks = np.asarray(ranks, dtype=np.int64)
    if ranks.size == 0:
        raise DataError("cannot compute Acc@N over zero queries")
    return {int(n): int((ranks <= n).sum()) / ranks.size for n in levels}


def macro_f1(true_labels, predicted_labels) -> float:
    """Unweighted mean over classes of per-class F1 = 2tp / (2tp + fp + fn).

    Classes are every label value appearing among truths or predictions,
    visited in ascending order; a class absent from both sides contributes
    nothing (it is never enumerated). The per-class formula and ascending
    summation order are part of the metric's definition here, so results
    are reproducible to the bit.
    """
    true_labels = np.asarray(true_labels)
    predicted_labels = np.asarray(predicted_labels)
    if true_labels.shape != predicted_labels.shape or true_labels.ndim != 1:
        raise DataError(
            f"label shape mismatch: {true_labels.shape} vs {predicted_labels.shape}"
        )
    if true_labels.size == 0:
        raise DataError("cannot compute macro-F1 over zero labels")
    classes, encoded = np.unique(
        np.concatenate([true_labels, predicted_labels]), return_inverse=True
    )
    t = encoded[: true_labels.size]
    p = encoded[true_labels.size :]
    k = classes.size
    true_count = np.bincount(t, minlength=k)
    pred_count = np.bincount(p, minlength=k)
    tp = np.bincount(t[t == p], minlength=k)
    f1_values = []
    for c in range(k):
        fp = int(pred_count[c]) - int(tp[c])
        fn = int(true_count[c]) - int(tp[c])
        f1_values.append(2 * int(tp[c]) / (2 * int(tp[c]) + fp + fn))
    return sum(f1_values) / len(f1_values)


def rank_candidates(scores: np.ndarray, descending: bool = True) -> np.ndarray:
    """Per-row candidate ordering; ties broken by ascending candidate index."""
    scores = np.asarray(scores, dtype=np.float64)
    keyed = -scores if descending else scores
    return np.argsort(keyed, axis=1, kind="stable")


def true_ranks_from_order(order: np.ndarray, true_index: np.ndarray) -> np.ndarray:
    """1-indexed rank of each row's true candidate under `order`."""
    n_rows, n_cand = order.shape
    inverse = np.empty_like(order)
    rows = np.arange(n_rows)[:, None]
    inverse[rows, order] = np.arange(n_cand)[None, :]
    return inverse[np.arange(n_rows), np.asarray(true_index, dtype=np.int64)] + 1


# ---------------------------------------------------------------------------
# similar-trajectory search
# ---------------------------------------------------------------------------


@dataclass
class SearchProtocolSet:
    """Odd-position (query) and even-position (candidate) sub-trajectories."""

    odd_set: dict[str, Trajectory]
    even_set: dict[str, Trajectory]


def build_search_sets(trajs: Sequence[Trajectory]) -> SearchProtocolSet:
    odd_set: dict[str, Trajectory] = {}
    even_set: dict[str, Trajectory] = {}
    for traj in trajs:
        if traj.traj_id in odd_set:
            raise DataError(f"duplicate trajectory id {traj.traj_id!r} in search set")
        odd_set[traj.traj_id] = traj.take(np.arange(0, traj.n, 2))
        even_set[traj.traj_id] = traj.take(np.arange(1, traj.n, 2))
    return SearchProtocolSet(odd_set=odd_set, even_set=even_set)


@dataclass
class RankingResult:
    """Full per-query candidate ordering plus the derived metrics.

    `order[i, j]` is the index into `candidate_ids` of the rank-(j+1)
    candidate for query i; each row is a permutation of the candidates.
    """

    query_ids: list[str]
    candidate_ids: list[str]
    order: np.ndarray
    true_ranks: dict[str, int]
    metrics: EvalMetrics

    def ranked_ids(self, query_id: str) -> list[str]:
        i = self.query_ids.index(query_id)
        return [self.candidate_ids[j] for j in self.order[i]]


def _embed_or_abort(embed_fn: Embedder, traj: Trajectory) -> np.ndarray:
    try:
        vec = np.asarray(embed_fn(traj), dtype=np.float64)
    except Exception as exc:
        raise DataError(f"embedding failed for trajectory {traj.traj_id!r}: {exc}") from exc
    if vec.ndim != 1 or not np.isfinite(vec).all():
        raise DataError(f"embedding for trajectory {traj.traj_id!r} is not a finite vector")
    return vec


def _ranking_result(ids: list[str], scores: np.ndarray, descending: bool, levels) -> RankingResult:
    order = rank_candidates(scores, descending=descending)
    true_index = np.arange(len(ids))
    ranks = true_ranks_from_order(order, true_index)
    top1 = [ids[order[i, 0]] for i in range(len(ids))]
    metrics = EvalMetrics(
        acc_at=acc_at_from_ranks(ranks, levels), macro_f1=macro_f1(ids, top1)
    )
    return RankingResult(
        query_ids=list(ids),
        candidate_ids=list(ids),
        order=order,
        true_ranks={ids[i]: int(ranks[i]) for i in range(len(ids))},
        metrics=metrics,
    )


def search_eval(
    embed_fn: Embedder, sets: SearchProtocolSet, levels=ACC_LEVELS
) -> RankingResult:
    """Rank even-side candidates for each odd-side query by dot product."""
    ids = sorted(sets.odd_set)
    if sorted(sets.even_set) != ids:
        raise DataError("query and candidate sets must hold the same trajectory ids")
    if len(ids) < 2:
        raise DataError(f"search needs at least 2 candidates, got {len(ids)}")
    queries = np.stack([_embed_or_abort(embed_fn, sets.odd_set[i]) for i in ids])
    candidates = np.stack([_embed_or_abort(embed_fn, sets.even_set[i]) for i in ids])
    if queries.shape[1] != candidates.shape[1]:
        raise DataError("query and candidate embeddings differ in width")
    scores = queries @ candidates.T
    return _ranking_result(ids, scores, descending=True, levels=levels)


# ---------------------------------------------------------------------------
# dynamic time warping
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _dtw_kernel(a: np.ndarray, b: np.ndarray) -> float:
    """Full-window DTW over (lon, lat) rows with Euclidean local cost.

    Rolling two-row DP keeps memory at O(len(b)) per call.
    """
    n, m = a.shape[0], b.shape[0]
    prev = np.empty(m, dtype=np.float64)
    curr = np.empty(m, dtype=np.float64)
    for j in range(m):
        dx = a[0, 0] - b[j, 0]
        dy = a[0, 1] - b[j, 1]
        cost = math.sqrt(dx * dx + dy * dy)
        prev[j] = cost if j == 0 else prev[j - 1] + cost
    for i in range(1, n):
        for j in range(m):
            dx = a[i, 0] - b[j, 0]
            dy = a[i, 1] - b[j, 1]
            cost = math.sqrt(dx * dx + dy * dy)
            if j == 0:
                curr[j] = prev[0] + cost
            else:
                best = prev[j]
                if prev[j - 1] < best:
                    best = prev[j - 1]
                if curr[j - 1] < best:
                    best = curr[j - 1]
                curr[j] = best + cost
        prev, curr = curr, prev
    return prev[m - 1]


def trajectory_points(traj: Trajectory) -> np.ndarray:
    return np.column_stack([traj.lon, traj.lat])


def dtw_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Cumulative cost of the optimal monotone alignment of two point rows."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != 2 or b.shape[1] != 2:
        raise DataError(f"dtw_distance expects (n, 2) point rows, got {a.shape} and {b.shape}")
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise DataError("dtw_distance: empty sequence")
    return float(_dtw_kernel(a, b))


def dtw_search_eval(
    sets: SearchProtocolSet, levels=ACC_LEVELS, n_threads: int = 1
) -> RankingResult:
    """Rank candidates by ascending DTW distance to each query."""
    ids = sorted(sets.odd_set)
    if sorted(sets.even_set) != ids:
        raise DataError("query and candidate sets must hold the same trajectory ids")
    if len(ids) < 2:
        raise DataError(f"search needs at least 2 candidates, got {len(ids)}")
    queries = [np.ascontiguousarray(trajectory_points(sets.odd_set[i])) for i in ids]
    candidates = [np.ascontiguousarray(trajectory_points(sets.even_set[i])) for i in ids]

    def query_row(q: np.ndarray) -> np.ndarray:
        return np.array([_dtw_kernel(q, c) for c in candidates])

    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            rows = list(pool.map(query_row, queries))
    else:
        rows = [query_row(q) for q in queries]
    distances = np.stack(rows)
    return _ranking_result(ids, distances, descending=False, levels=levels)


# ---------------------------------------------------------------------------
# destination prediction
# ---------------------------------------------------------------------------


def destination_dataset(trajs: Sequence[Trajectory]) -> tuple[list[Trajectory], np.ndarray]:
    """Truncate each trajectory before its last record; label = that record's cell."""
    truncated: list[Trajectory] = []
    labels: list[int] = []
    for traj in trajs:
        if traj.n < 3:
            raise DataError(
                f"trajectory {traj.traj_id!r} too short for destination prediction ({traj.n})"
            )
        label = int(traj.loc[-1])
        if label < 0:
            raise DataError(f"trajectory {traj.traj_id!r} has no grid index on its last record")
        truncated.append(traj.take(np.arange(traj.n - 1)))
        labels.append(label)
    return truncated, np.asarray(labels, dtype=np.int64)


def majority_class_rate(labels) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise DataError("cannot compute majority rate over zero labels")
    return int(np.bincount(labels).max()) / labels.size


@dataclass(frozen=True)
class HeadConfig:
    """Hyperparameters for the destination heads (probe and Mean baseline)."""

    learning_rate: float = 0.001
    batch_size: int = 256
    max_epochs: int = 50
    patience: int = 5
    fine_tune: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "fine_tune": self.fine_tune,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HeadConfig":
        return cls(**d)


@dataclass
class DestinationHead:
    """Linear map from embeddings to location logits."""

    weight: np.ndarray
    bias: np.ndarray

    @property
    def n_locations(self) -> int:
        return self.weight.shape[1]

    def predict_logits(self, embeddings: np.ndarray) -> np.ndarray:
        return np.asarray(embeddings, dtype=np.float64) @ self.weight + self.bias


def _check_labels(labels: np.ndarray, n_locations: int, split: str) -> None:
    if labels.size == 0:
        raise DataError(f"{split} split has no destination labels")
    if labels.min() < 0 or labels.max() >= n_locations:
        raise DataError(
            f"{split} split has a destination label outside [0, {n_locations})"
        )


def _accuracy_top1(logits: np.ndarray, labels: np.ndarray) -> float:
    order = rank_candidates(logits, descending=True)
    return float((order[:, 0] == labels).sum()) / labels.size


def _train_logit_model(
    param_arrays: dict[str, np.ndarray],
    logits_fn: Callable[[dict[str, nc.DiffArray], nc.DiffArray], nc.DiffArray],
    train_features: np.ndarray,
    train_labels: np.ndarray,
    val_features: np.ndarray,
    val_labels: np.ndarray,
    config: HeadConfig,
    seed: int,
) -> dict[str, np.ndarray]:
    """Adam + cross-entropy over fixed feature matrices.

    Early stops on validation top-1 accuracy (strict improvement resets
    patience); returns the best epoch's parameter values.
    """
    params = {name: nc.parameter(arr) for name, arr in param_arrays.items()}
    state = nc.AdamState(params, learning_rate=config.learning_rate)
    shuffle_rng = _stream(seed, _SEED_HEAD_SHUFFLE)

    def predict(features: np.ndarray) -> np.ndarray:
        return logits_fn(params, nc.constant(features)).data

    best = {name: p.data.copy() for name, p in params.items()}
    best_acc = _accuracy_top1(predict(val_features), val_labels)
    stale = 0
    n = train_features.shape[0]
    for _ in range(config.max_epochs):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            tape = nc.Tape()
            with nc.recording(tape):
                logits = logits_fn(params, nc.constant(train_features[idx]))
                loss = nc.cross_entropy_mean(logits, train_labels[idx])
            nc.backward(tape, loss)
            nc.adam_step(params, state)
        acc = _accuracy_top1(predict(val_features), val_labels)
        if acc > best_acc:
            best_acc = acc
            best = {name: p.data.copy() for name, p in params.items()}
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return best


def train_destination_head(
    train_embeddings: np.ndarray,
    train_labels: np.ndarray,
    val_embeddings: np.ndarray,
    val_labels: np.ndarray,
    n_locations: int,
    config: HeadConfig = HeadConfig(),
    seed: int = 42,
) -> DestinationHead:
    """Linear probe on frozen embeddings, cross-entropy with Adam."""
    train_labels = np.asarray(train_labels, dtype=np.int64)
    val_labels = np.asarray(val_labels, dtype=np.int64)
    _check_labels(train_labels, n_locations, "train")
    _check_labels(val_labels, n_locations, "validation")
    d = train_embeddings.shape[1]
    rng = _stream(seed, _SEED_HEAD_INIT)
    bound = math.sqrt(1.0 / d)
    init = {
        "head.w": rng.uniform(-bound, bound, size=(d, n_locations)),
        "head.b": np.zeros(n_locations),
    }

    def logits_fn(params, features):
        return nc.add_row(nc.matmul(features, params["head.w"]), params["head.b"])

    best = _train_logit_model(
        init, logits_fn, train_embeddings, train_labels,
        val_embeddings, val_labels, config, seed,
    )
    return DestinationHead(weight=best["head.w"], bias=best["head.b"])


def destination_eval(
    head_logits: np.ndarray, labels: np.ndarray, levels=ACC_LEVELS
) -> EvalMetrics:
    """Acc@N and macro-F1 from a logits table and true location labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if head_logits.shape[0] != labels.shape[0]:
        raise DataError(
            f"logits rows {head_logits.shape[0]} != labels {labels.shape[0]}"
        )
    _check_labels(labels, head_logits.shape[1], "evaluation")
    order = rank_candidates(head_logits, descending=True)
    ranks = true_ranks_from_order(order, labels)
    return EvalMetrics(
        acc_at=acc_at_from_ranks(ranks, levels),
        macro_f1=macro_f1(labels, order[:, 0]),
    )


# ---------------------------------------------------------------------------
# Markov-chain baseline
# ---------------------------------------------------------------------------


class MarkovChain:
    """First-order transition model with add-one smoothing."""

    def __init__(self, n_locations: int):
        if n_locations < 1:
            raise ConfigError(f"n_locations must be >= 1, got {n_locations}")
        self.n_locations = int(n_locations)
        self.counts = np.zeros((self.n_locations, self.n_locations), dtype=np.float64)

    def fit(self, trajs: Sequence[Trajectory]) -> "MarkovChain":
        for traj in trajs:
            loc = traj.loc
            if loc.min() < 0 or loc.max() >= self.n_locations:
                raise DataError(
                    f"trajectory {traj.traj_id!r} has a location outside "
                    f"[0, {self.n_locations})"
                )
            np.add.at(self.counts, (loc[:-1], loc[1:]), 1.0)
        return self

    def probabilities(self, source: int) -> np.ndarray:
        """P(next location | source), smoothed; sums to 1."""
        if not 0 <= source < self.n_locations:
            raise DataError(f"source location {source} outside [0, {self.n_locations})")
        row = self.counts[source] + 1.0
        return row / row.sum()

    def ranked(self, source: int) -> np.ndarray:
        """All locations by descending probability, ties by ascending index."""
        return rank_candidates(self.probabilities(source)[None, :], descending=True)[0]


def markov_destination_eval(
    chain: MarkovChain, trajs: Sequence[Trajectory], levels=ACC_LEVELS
) -> EvalMetrics:
    """Predict each trajectory's held-out last location from its previous one."""
    truncated, labels = destination_dataset(trajs)
    scores = np.stack([chain.probabilities(int(tr.loc[-1])) for tr in truncated])
    return destination_eval(scores, labels, levels)


# ---------------------------------------------------------------------------
# Mean baseline
# ---------------------------------------------------------------------------


class MeanBaseline:
    """Mean-pooled frozen record encodings followed by a linear map.

    The record encodings reuse the encoder's input features (location
    embedding plus the trigonometric time/coordinate maps) at their seeded
    initialization; they are never trained. The linear map to the output
    width stays at initialization for search and is trained end-to-end for
    destination prediction.
    """

    MAP_WEIGHT = "mean.map.w"
    MAP_BIAS = "mean.map.b"

    def __init__(self, config: enc.EncoderConfig, normalization, seed: int = 42):
        self.config = config
        self.normalization = normalization
        rng = _stream(seed, _SEED_MEAN_INIT)
        drawn = enc.init_params(config, rng)
        feature_keys = ("loc_emb", "psi_t.omega", "psi_cx.omega", "psi_cy.omega")
        self.record_params = {
            name: nc.constant(p.data) for name, p in drawn.items() if name in feature_keys
        }
        bound = math.sqrt(1.0 / config.d_l)
        self.map_weight = rng.uniform(-bound, bound, size=(config.d_l, config.output_dim))
        self.map_bias = np.zeros(config.output_dim)

    def pooled_features(self, traj: Trajectory) -> np.ndarray:
        tr = self.normalization.apply(traj)
        rows = enc.encode_sequence(
            self.record_params, self.config, tr.loc, tr.t, tr.lon, tr.lat
        )
        return rows.data.mean(axis=0)

    def feature_matrix(self, trajs: Sequence[Trajectory]) -> np.ndarray:
        return np.stack([self.pooled_features(tr) for tr in trajs])

    def embed(self, traj: Trajectory) -> np.ndarray:
        return self.pooled_features(traj) @ self.map_weight + self.map_bias


@dataclass
class MeanDestinationModel:
    """Mean baseline's trained map plus its destination head."""

    baseline: MeanBaseline
    map_weight: np.ndarray
    map_bias: np.ndarray
    head: DestinationHead

    def predict_logits(self, pooled: np.ndarray) -> np.ndarray:
        hidden = np.asarray(pooled, dtype=np.float64) @ self.map_weight + self.map_bias
        return self.head.predict_logits(hidden)


def train_mean_destination(
    baseline: MeanBaseline,
    train_pooled: np.ndarray,
    train_labels: np.ndarray,
    val_pooled: np.ndarray,
    val_labels: np.ndarray,
    n_locations: int,
    config: HeadConfig = HeadConfig(),
    seed: int = 42,
) -> MeanDestinationModel:
    """Train the pooling map and the head jointly on the destination task."""
    train_labels = np.asarray(train_labels, dtype=np.int64)
    val_labels = np.asarray(val_labels, dtype=np.int64)
    _check_labels(train_labels, n_locations, "train")
    _check_labels(val_labels, n_locations, "validation")
    d_out = baseline.config.output_dim
    rng = _stream(seed, _SEED_HEAD_INIT)
    bound = math.sqrt(1.0 / d_out)
    init = {
        MeanBaseline.MAP_WEIGHT: baseline.map_weight.copy(),
        MeanBaseline.MAP_BIAS: baseline.map_bias.copy(),
        "head.w": rng.uniform(-bound, bound, size=(d_out, n_locations)),
        "head.b": np.zeros(n_locations),
    }

    def logits_fn(params, features):
        hidden = nc.add_row(
            nc.matmul(features, params[MeanBaseline.MAP_WEIGHT]),
            params[MeanBaseline.MAP_BIAS],
        )
        return nc.add_row(nc.matmul(hidden, params["head.w"]), params["head.b"])

    best = _train_logit_model(
        init, logits_fn, train_pooled, train_labels, val_pooled, val_labels, config, seed
    )
    return MeanDestinationModel(
        baseline=baseline,
        map_weight=best[MeanBaseline.MAP_WEIGHT],
        map_bias=best[MeanBaseline.MAP_BIAS],
        head=DestinationHead(weight=best["head.w"], bias=best["head.b"]),
    )


# ---------------------------------------------------------------------------
# checkpoint-backed embedding and optional fine-tuning
# ---------------------------------------------------------------------------


def checkpoint_embedder(ckpt: Checkpoint) -> Embedder:
    """Frozen-encoder embedding function for raw (unnormalized) trajectories."""
    params = enc.params_from_arrays(ckpt.params)

    def embed(traj: Trajectory) -> np.ndarray:
        normalized = ckpt.normalization.apply(traj)
        return enc.encode_trajectory(params, ckpt.encoder_config, normalized).data

    return embed


def embedding_matrix(embed_fn: Embedder, trajs: Sequence[Trajectory]) -> np.ndarray:
    return np.stack([_embed_or_abort(embed_fn, tr) for tr in trajs])


def fine_tune_destination(
    ckpt: Checkpoint,
    train_trajs: Sequence[Trajectory],
    train_labels: np.ndarray,
    val_trajs: Sequence[Trajectory],
    val_labels: np.ndarray,
    n_locations: int,
    config: HeadConfig,
    seed: int = 42,
) -> tuple[dict[str, np.ndarray], DestinationHead]:
    """Destination training that also updates the encoder (opt-in, slow).

    Returns the tuned encoder parameter arrays and the head. Early stopping
    mirrors the linear probe: validation top-1 accuracy, strict improvement.
    """
    train_labels = np.asarray(train_labels, dtype=np.int64)
    val_labels = np.asarray(val_labels, dtype=np.int64)
    _check_labels(train_labels, n_locations, "train")
    _check_labels(val_labels, n_locations, "validation")
    enc_config = ckpt.encoder_config
    params = enc.params_from_arrays(ckpt.params, trainable=True)
    d = enc_config.output_dim
    rng = _stream(seed, _SEED_HEAD_INIT)
    bound = math.sqrt(1.0 / d)
    params["head.w"] = nc.parameter(rng.uniform(-bound, bound, size=(d, n_locations)))
    params["head.b"] = nc.parameter(np.zeros(n_locations))
    state = nc.AdamState(params, learning_rate=config.learning_rate)
    shuffle_rng = _stream(seed, _SEED_HEAD_SHUFFLE)

    train_norm = [ckpt.normalization.apply(tr) for tr in train_trajs]
    val_norm = [ckpt.normalization.apply(tr) for tr in val_trajs]

    def val_accuracy() -> float:
        logits = np.stack(
            [
                enc.encode_trajectory(params, enc_config, tr).data @ params["head.w"].data
                + params["head.b"].data
                for tr in val_norm
            ]
        )
        return _accuracy_top1(logits, val_labels)

    def snapshot() -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in params.items()}

    best = snapshot()
    best_acc = val_accuracy()
    stale = 0
    n = len(train_norm)
    for _ in range(config.max_epochs):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            tape = nc.Tape()
            with nc.recording(tape):
                per_sample = []
                for pos in idx:
                    emb = enc.encode_trajectory(params, enc_config, train_norm[int(pos)])
                    row = nc.reshape(emb, (1, d))
                    logits = nc.add_row(nc.matmul(row, params["head.w"]), params["head.b"])
                    per_sample.append(
                        nc.cross_entropy_mean(logits, [int(train_labels[int(pos)])])
                    )
                loss = nc.scale(nc.sum_all(nc.stack_scalars(per_sample)), 1.0 / len(per_sample))
            nc.backward(tape, loss)
            nc.adam_step(params, state)
        acc = val_accuracy()
        if acc > best_acc:
            best_acc = acc
            best = snapshot()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    head = DestinationHead(weight=best.pop("head.w"), bias=best.pop("head.b"))
    return best, head
