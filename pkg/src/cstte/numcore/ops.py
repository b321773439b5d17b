"""Differentiable operators over DiffArray.

Every op computes its forward value eagerly with numpy and, when a tape is
recording and an input requires a gradient, appends a closure implementing
the exact backward rule. Ops work without an active tape too (pure forward),
which is what the finite-difference checks and frozen-encoder paths use.
"""

from __future__ import annotations

import numpy as np

from cstte.errors import NumericError, ShapeError
from cstte.numcore.tape import (
    DiffArray,
    accumulate,
    active_tape,
    deterministic_mode,
)


def as_diff(x) -> DiffArray:
    if isinstance(x, DiffArray):
        return x
    return DiffArray(x, requires_grad=False)


def _record(out: DiffArray, backward_fn, *inputs: DiffArray) -> DiffArray:
    tape = active_tape()
    if tape is not None and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        tape.record(out, backward_fn)
    return out


def _check_2d(name: str, x: DiffArray) -> None:
    if x.data.ndim != 2:
        raise ShapeError(f"{name}: expected a 2-d array, got shape {x.data.shape}")


def _check_1d(name: str, x: DiffArray) -> None:
    if x.data.ndim != 1:
        raise ShapeError(f"{name}: expected a 1-d array, got shape {x.data.shape}")


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> DiffArray:
    """Elementwise sum of two same-shape arrays."""
    a, b = as_diff(a), as_diff(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: shape {a.data.shape} vs {b.data.shape}")
    out = DiffArray(a.data + b.data)

    def backward_fn(g):
        if a.requires_grad:
            accumulate(a, g)
        if b.requires_grad:
            accumulate(b, g)

    return _record(out, backward_fn, a, b)


def sub(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub: shape {a.data.shape} vs {b.data.shape}")
    out = DiffArray(a.data - b.data)

    def backward_fn(g):
        if a.requires_grad:
            accumulate(a, g)
        if b.requires_grad:
            accumulate(b, -g)

    return _record(out, backward_fn, a, b)


def mul(a, b) -> DiffArray:
    """Elementwise (Hadamard) product."""
    a, b = as_diff(a), as_diff(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: shape {a.data.shape} vs {b.data.shape}")
    out = DiffArray(a.data * b.data)

    def backward_fn(g):
        if a.requires_grad:
            accumulate(a, g * b.data)
        if b.requires_grad:
            accumulate(b, g * a.data)

    return _record(out, backward_fn, a, b)


def scale(a, s: float) -> DiffArray:
    a = as_diff(a)
    s = float(s)
    out = DiffArray(a.data * s)

    def backward_fn(g):
        if a.requires_grad:
            accumulate(a, g * s)

    return _record(out, backward_fn, a)


def add_row(mat, row) -> DiffArray:
    """Add a length-d row vector to every row of an N x d matrix."""
    mat, row = as_diff(mat), as_diff(row)
    _check_2d("add_row", mat)
    _check_1d("add_row", row)
    if mat.data.shape[1] != row.data.shape[0]:
        raise ShapeError(f"add_row: shape {mat.data.shape} vs {row.data.shape}")
    out = DiffArray(mat.data + row.data[None, :])

    def backward_fn(g):
        if mat.requires_grad:
            accumulate(mat, g)
        if row.requires_grad:
            accumulate(row, g.sum(axis=0))

    return _record(out, backward_fn, mat, row)


def relu(x) -> DiffArray:
    x = as_diff(x)
    out = DiffArray(np.maximum(x.data, 0.0))

    def backward_fn(g):
        if x.requires_grad:
            accumulate(x, g * (x.data > 0.0))

    return _record(out, backward_fn, x)


def reshape(x, shape) -> DiffArray:
    """Row-major reshape; backward restores the original shape."""
    x = as_diff(x)
    shape = tuple(int(s) for s in shape)
    out = DiffArray(x.data.reshape(shape))

    def backward_fn(g):
        if x.requires_grad:
            accumulate(x, g.reshape(x.data.shape))

    return _record(out, backward_fn, x)


def concat_cols(a, b) -> DiffArray:
    """Concatenate two matrices with equal row counts along columns."""
    a, b = as_diff(a), as_diff(b)
    _check_2d("concat_cols", a)
    _check_2d("concat_cols", b)
    if a.data.shape[0] != b.data.shape[0]:
        raise ShapeError(f"concat_cols: shape {a.data.shape} vs {b.data.shape}")
    p = a.data.shape[1]
    out = DiffArray(np.concatenate([a.data, b.data], axis=1))

    def backward_fn(g):
        if a.requires_grad:
            accumulate(a, g[:, :p])
        if b.requires_grad:
            accumulate(b, g[:, p:])

    return _record(out, backward_fn, a, b)


def gather_rows(table, indices) -> DiffArray:
    """Select rows of `table` by integer index; backward scatter-adds."""
    table = as_diff(table)
    _check_2d("gather_rows", table)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows: indices must be 1-d, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ShapeError(
            f"gather_rows: index out of range for table with {table.data.shape[0]} rows"
        )
    out = DiffArray(table.data[idx])

    def backward_fn(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx, g)
            accumulate(table, gt)

    return _record(out, backward_fn, table)


def stack_scalars(items) -> DiffArray:
    """Stack scalar DiffArrays into a 1-d vector."""
    items = [as_diff(i) for i in items]
    for i in items:
        if i.data.size != 1:
            raise ShapeError(f"stack_scalars: non-scalar entry of shape {i.data.shape}")
    out = DiffArray(np.array([i.data.reshape(()) for i in items]))

    def backward_fn(g):
        for k, item in enumerate(items):
            if item.requires_grad:
                accumulate(item, np.asarray(g[k]).reshape(item.data.shape))

    return _record(out, backward_fn, *items)


def pick(vec, index: int) -> DiffArray:
    """Scalar element of a 1-d vector."""
    vec = as_diff(vec)
    _check_1d("pick", vec)
    index = int(index)
    if not 0 <= index < vec.data.shape[0]:
        raise ShapeError(f"pick: index {index} out of range for shape {vec.data.shape}")
    out = DiffArray(vec.data[index])

    def backward_fn(g):
        if vec.requires_grad:
            gv = np.zeros_like(vec.data)
            gv[index] = g
            accumulate(vec, gv)

    return _record(out, backward_fn, vec)


# ---------------------------------------------------------------------------
# reductions and linear algebra
# ---------------------------------------------------------------------------


def sum_all(x) -> DiffArray:
    x = as_diff(x)
    out = DiffArray(x.data.sum())

    def backward_fn(g):
        if x.requires_grad:
            accumulate(x, np.broadcast_to(g, x.data.shape).copy())

    return _record(out, backward_fn, x)


def mean_rows(x) -> DiffArray:
    """Column means of an N x d matrix (mean pooling over rows)."""
    x = as_diff(x)
    _check_2d("mean_rows", x)
    n = x.data.shape[0]
    out = DiffArray(x.data.mean(axis=0))

    def backward_fn(g):
        if x.requires_grad:
            accumulate(x, np.broadcast_to(g / n, x.data.shape).copy())

    return _record(out, backward_fn, x)


def dot(a, b) -> DiffArray:
    """Inner product of two 1-d vectors."""
    a, b = as_diff(a), as_diff(b)
    _check_1d("dot", a)
    _check_1d("dot", b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"dot: shape {a.data.shape} vs {b.data.shape}")
    out = DiffArray(a.data @ b.data)

    def backward_fn(g):
        if a.requires_grad:
            accumulate(a, g * b.data)
        if b.requires_grad:
            accumulate(b, g * a.data)

    return _record(out, backward_fn, a, b)


def matmul(a, b) -> DiffArray:
    """2-d matrix product; backward is g @ b^T and a^T @ g."""
    a, b = as_diff(a), as_diff(b)
    _check_2d("matmul", a)
    _check_2d("matmul", b)
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: shape {a.data.shape} vs {b.data.shape}")
    out = DiffArray(a.data @ b.data)

    def backward_fn(g):
        if a.requires_grad:
            accumulate(a, g @ b.data.T)
        if b.requires_grad:
            accumulate(b, a.data.T @ g)

    return _record(out, backward_fn, a, b)


def logsumexp(v) -> DiffArray:
    """Stable log-sum-exp of a 1-d vector; backward is its softmax."""
    v = as_diff(v)
    _check_1d("logsumexp", v)
    m = v.data.max()
    e = np.exp(v.data - m)
    out = DiffArray(m + np.log(e.sum()))

    def backward_fn(g):
        if v.requires_grad:
            accumulate(v, g * (e / e.sum()))

    return _record(out, backward_fn, v)


def softmax_rows(x) -> DiffArray:
    """Row-wise softmax of an N x d matrix, shifted by the row max."""
    x = as_diff(x)
    _check_2d("softmax_rows", x)
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = DiffArray(y)

    def backward_fn(g):
        if x.requires_grad:
            accumulate(x, y * (g - (g * y).sum(axis=1, keepdims=True)))

    return _record(out, backward_fn, x)


def l2_normalize(v) -> DiffArray:
    """v / ||v|| for a 1-d vector; rejects the zero vector."""
    v = as_diff(v)
    _check_1d("l2_normalize", v)
    norm = float(np.linalg.norm(v.data))
    if norm == 0.0:
        raise NumericError("l2_normalize: zero vector")
    y = v.data / norm
    out = DiffArray(y)

    def backward_fn(g):
        if v.requires_grad:
            accumulate(v, (g - y * (y @ g)) / norm)

    return _record(out, backward_fn, v)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> DiffArray:
    """Per-row normalization of an N x d matrix with learned gain and bias."""
    x, gain, bias = as_diff(x), as_diff(gain), as_diff(bias)
    _check_2d("layer_norm", x)
    _check_1d("layer_norm", gain)
    _check_1d("layer_norm", bias)
    d = x.data.shape[1]
    if gain.data.shape[0] != d or bias.data.shape[0] != d:
        raise ShapeError(
            f"layer_norm: x {x.data.shape} vs gain {gain.data.shape} bias {bias.data.shape}"
        )
    mu = x.data.mean(axis=1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = DiffArray(xhat * gain.data[None, :] + bias.data[None, :])

    def backward_fn(g):
        if gain.requires_grad:
            accumulate(gain, (g * xhat).sum(axis=0))
        if bias.requires_grad:
            accumulate(bias, g.sum(axis=0))
        if x.requires_grad:
            gn = g * gain.data[None, :]
            accumulate(
                x,
                inv
                * (
                    gn
                    - gn.mean(axis=1, keepdims=True)
                    - xhat * (gn * xhat).mean(axis=1, keepdims=True)
                ),
            )

    return _record(out, backward_fn, x, gain, bias)


# ---------------------------------------------------------------------------
# continuous-value trig encoding
# ---------------------------------------------------------------------------


def trig_encode(omega, values) -> DiffArray:
    """Interleaved [cos(w_i v), sin(w_i v)] features for each value.

    `values` is plain data (never differentiated); `omega` is the learnable
    frequency vector. Output is N x 2m with cosines in even columns.
    """
    omega = as_diff(omega)
    _check_1d("trig_encode", omega)
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"trig_encode: values must be 1-d, got shape {v.shape}")
    angles = v[:, None] * omega.data[None, :]
    cos_a = np.cos(angles)
    sin_a = np.sin(angles)
    out_data = np.empty((v.shape[0], 2 * omega.data.shape[0]))
    out_data[:, 0::2] = cos_a
    out_data[:, 1::2] = sin_a
    out = DiffArray(out_data)

    def backward_fn(g):
        if omega.requires_grad:
            g_cos = g[:, 0::2]
            g_sin = g[:, 1::2]
            accumulate(omega, (v[:, None] * (g_sin * cos_a - g_cos * sin_a)).sum(axis=0))

    return _record(out, backward_fn, omega)


# ---------------------------------------------------------------------------
# attention and feed-forward blocks
# ---------------------------------------------------------------------------


def _stable_contract(a: np.ndarray, b: np.ndarray, spec: str) -> np.ndarray:
    # einsum without optimization accumulates the contracted axis in a fixed
    # index order per output element, independent of the positions of the
    # non-contracted axes; that keeps projections bit-stable when key/value
    # rows are permuted.
    return np.einsum(spec, a, b, optimize=False)


def _canonical_sum(arr: np.ndarray, axis: int) -> np.ndarray:
    # Permutation-invariant reduction: sorting the addends fixes a canonical
    # order, so the pairwise sum is bit-identical for any input permutation.
    return np.sort(arr, axis=axis).sum(axis=axis)


def multi_head_attention(
    query,
    key,
    value,
    wq,
    bq,
    wk,
    bk,
    wv,
    bv,
    wo,
    bo,
    n_heads: int,
) -> DiffArray:
    """Scaled dot-product attention with per-head projections.

    query is M x d, key/value are N x d, all projection weights are d x d
    with length-d biases. Scores are scaled by 1/sqrt(d/n_heads). In
    deterministic mode the two reductions over N (softmax denominator and
    value aggregation) use canonical sorted-order summation, making the
    output bit-exactly invariant to a simultaneous permutation of key and
    value rows.
    """
    query, key, value = as_diff(query), as_diff(key), as_diff(value)
    wq, bq = as_diff(wq), as_diff(bq)
    wk, bk = as_diff(wk), as_diff(bk)
    wv, bv = as_diff(wv), as_diff(bv)
    wo, bo = as_diff(wo), as_diff(bo)
    _check_2d("multi_head_attention", query)
    _check_2d("multi_head_attention", key)
    _check_2d("multi_head_attention", value)
    m_rows, d = query.data.shape
    n_rows = key.data.shape[0]
    if key.data.shape[1] != d or value.data.shape != key.data.shape:
        raise ShapeError(
            f"multi_head_attention: query {query.data.shape} key {key.data.shape} "
            f"value {value.data.shape}"
        )
    for name, w, b in (("wq", wq, bq), ("wk", wk, bk), ("wv", wv, bv), ("wo", wo, bo)):
        if w.data.shape != (d, d) or b.data.shape != (d,):
            raise ShapeError(
                f"multi_head_attention: {name} {w.data.shape} bias {b.data.shape} "
                f"for width {d}"
            )
    n_heads = int(n_heads)
    if n_heads < 1 or d % n_heads != 0:
        raise ShapeError(f"multi_head_attention: width {d} not divisible by {n_heads} heads")
    d_head = d // n_heads
    inv_scale = 1.0 / np.sqrt(d_head)
    det = deterministic_mode()

    q_proj = query.data @ wq.data + bq.data[None, :]
    if det:
        k_proj = _stable_contract(key.data, wk.data, "nd,df->nf") + bk.data[None, :]
        v_proj = _stable_contract(value.data, wv.data, "nd,df->nf") + bv.data[None, :]
    else:
        k_proj = key.data @ wk.data + bk.data[None, :]
        v_proj = value.data @ wv.data + bv.data[None, :]

    qh = q_proj.reshape(m_rows, n_heads, d_head).transpose(1, 0, 2)
    kh = k_proj.reshape(n_rows, n_heads, d_head).transpose(1, 0, 2)
    vh = v_proj.reshape(n_rows, n_heads, d_head).transpose(1, 0, 2)

    if det:
        scores = _stable_contract(qh, kh, "hmd,hnd->hmn") * inv_scale
    else:
        scores = (qh @ kh.transpose(0, 2, 1)) * inv_scale
    shifted = scores - scores.max(axis=2, keepdims=True)
    exp_s = np.exp(shifted)
    if det:
        denom = _canonical_sum(exp_s, axis=2)[:, :, None]
    else:
        denom = exp_s.sum(axis=2, keepdims=True)
    weights = exp_s / denom

    if det:
        prod = weights[:, :, :, None] * vh[:, None, :, :]
        heads_out = _canonical_sum(prod, axis=2)
    else:
        heads_out = weights @ vh
    concat = heads_out.transpose(1, 0, 2).reshape(m_rows, d)
    out = DiffArray(concat @ wo.data + bo.data[None, :])

    def backward_fn(g):
        d_concat = g @ wo.data.T
        if wo.requires_grad:
            accumulate(wo, concat.T @ g)
        if bo.requires_grad:
            accumulate(bo, g.sum(axis=0))
        d_heads = d_concat.reshape(m_rows, n_heads, d_head).transpose(1, 0, 2)
        d_weights = d_heads @ vh.transpose(0, 2, 1)
        d_vh = weights.transpose(0, 2, 1) @ d_heads
        d_scores = (
            weights * (d_weights - (d_weights * weights).sum(axis=2, keepdims=True))
        ) * inv_scale
        d_qh = d_scores @ kh
        d_kh = d_scores.transpose(0, 2, 1) @ qh
        d_q_proj = d_qh.transpose(1, 0, 2).reshape(m_rows, d)
        d_k_proj = d_kh.transpose(1, 0, 2).reshape(n_rows, d)
        d_v_proj = d_vh.transpose(1, 0, 2).reshape(n_rows, d)
        if query.requires_grad:
            accumulate(query, d_q_proj @ wq.data.T)
        if wq.requires_grad:
            accumulate(wq, query.data.T @ d_q_proj)
        if bq.requires_grad:
            accumulate(bq, d_q_proj.sum(axis=0))
        if key.requires_grad:
            accumulate(key, d_k_proj @ wk.data.T)
        if wk.requires_grad:
            accumulate(wk, key.data.T @ d_k_proj)
        if bk.requires_grad:
            accumulate(bk, d_k_proj.sum(axis=0))
        if value.requires_grad:
            accumulate(value, d_v_proj @ wv.data.T)
        if wv.requires_grad:
            accumulate(wv, value.data.T @ d_v_proj)
        if bv.requires_grad:
            accumulate(bv, d_v_proj.sum(axis=0))

    return _record(out, backward_fn, query, key, value, wq, bq, wk, bk, wv, bv, wo, bo)


def feed_forward(x, w1, b1, w2, b2) -> DiffArray:
    """Two-layer position-wise MLP with ReLU: relu(x w1 + b1) w2 + b2."""
    hidden = relu(add_row(matmul(x, w1), b1))
    return add_row(matmul(hidden, w2), b2)


def cross_entropy_mean(logits, labels) -> DiffArray:
    """Mean softmax cross-entropy of B x C logits against integer labels."""
    logits = as_diff(logits)
    _check_2d("cross_entropy_mean", logits)
    y = np.asarray(labels, dtype=np.int64)
    b_rows, n_classes = logits.data.shape
    if y.shape != (b_rows,):
        raise ShapeError(
            f"cross_entropy_mean: labels shape {y.shape} for logits {logits.data.shape}"
        )
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ShapeError(f"cross_entropy_mean: label out of range for {n_classes} classes")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    exp_s = np.exp(shifted)
    probs = exp_s / exp_s.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(exp_s.sum(axis=1, keepdims=True))
    out = DiffArray(-log_probs[np.arange(b_rows), y].mean())

    def backward_fn(g):
        if logits.requires_grad:
            grad = probs.copy()
            grad[np.arange(b_rows), y] -= 1.0
            accumulate(logits, grad * (g / b_rows))

    return _record(out, backward_fn, logits)
