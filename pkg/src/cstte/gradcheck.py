"""Finite-difference verification of the differentiable operators.

Central differences with step h on every element of every parameter, compared
to the tape's analytic gradients as a relative error with a magnitude floor:
max |a - n| / max(|a|, |n|, floor). Linear ops get a tighter tolerance since
their central difference is exact up to rounding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from cstte import encoder as enc
from cstte import numcore as nc
from cstte.augment import assign_negatives, two_hop_split
from cstte.pretrain import TrainConfig, batch_loss, info_nce
from cstte.trajdata import Trajectory

LINEAR_TOL = 1e-6
NONLINEAR_TOL = 1e-4
DEFAULT_STEP = 1e-5
_REL_FLOOR = 1e-3

LossFn = Callable[[], nc.DiffArray]


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def analytic_gradients(loss_fn: LossFn, params: dict[str, nc.DiffArray]) -> dict[str, np.ndarray]:
    for p in params.values():
        p.grad = None
    tape = nc.Tape()
    with nc.recording(tape):
        loss = loss_fn()
    nc.backward(tape, loss)
    grads = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }
    for p in params.values():
        p.grad = None
    return grads


def finite_difference_gradients(
    loss_fn: LossFn, params: dict[str, nc.DiffArray], step: float = DEFAULT_STEP
) -> dict[str, np.ndarray]:
    grads = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        g = np.zeros(flat.shape[0])
        for i in range(flat.shape[0]):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(loss_fn().data)
            flat[i] = orig - step
            f_minus = float(loss_fn().data)
            flat[i] = orig
            g[i] = (f_plus - f_minus) / (2.0 * step)
        grads[name] = g.reshape(p.data.shape)
    return grads


def max_relative_error(
    analytic: dict[str, np.ndarray], numeric: dict[str, np.ndarray], floor: float = _REL_FLOOR
) -> float:
    worst = 0.0
    for name in analytic:
        a, n = analytic[name], numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst


def check(
    name: str,
    loss_fn: LossFn,
    params: dict[str, nc.DiffArray],
    tolerance: float,
    step: float = DEFAULT_STEP,
) -> CheckResult:
    if nc.active_tape() is not None:
        raise RuntimeError("gradcheck must run outside any recording block")
    analytic = analytic_gradients(loss_fn, params)
    numeric = finite_difference_gradients(loss_fn, params, step)
    return CheckResult(name, max_relative_error(analytic, numeric), tolerance)


# ---------------------------------------------------------------------------
# the suite
# ---------------------------------------------------------------------------


def _weighted(out: nc.DiffArray, weight: np.ndarray) -> nc.DiffArray:
    # random projection to a scalar so every output element is exercised
    return nc.sum_all(nc.mul(out, nc.constant(weight)))


def _away_from_zero(rng: np.random.Generator, shape) -> np.ndarray:
    # keep |x| > 0.2 so the relu kink never sits inside the FD stencil
    return rng.uniform(0.2, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def operator_suite(seed: int = 13, step: float = DEFAULT_STEP) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results: list[CheckResult] = []

    def run(name, params, loss_fn, tol):
        results.append(check(name, loss_fn, params, tol, step))

    a = nc.parameter(rng.normal(size=(4, 3)))
    b = nc.parameter(rng.normal(size=(4, 3)))
    w = rng.normal(size=(4, 3))
    run("add", {"a": a, "b": b}, lambda: _weighted(nc.add(a, b), w), LINEAR_TOL)
    run("sub", {"a": a, "b": b}, lambda: _weighted(nc.sub(a, b), w), LINEAR_TOL)
    run("mul", {"a": a, "b": b}, lambda: _weighted(nc.mul(a, b), w), LINEAR_TOL)
    run("scale", {"a": a}, lambda: _weighted(nc.scale(a, 1.7), w), LINEAR_TOL)

    row = nc.parameter(rng.normal(size=3))
    run("add_row", {"a": a, "row": row}, lambda: _weighted(nc.add_row(a, row), w), LINEAR_TOL)

    m1 = nc.parameter(rng.normal(size=(3, 4)))
    m2 = nc.parameter(rng.normal(size=(4, 5)))
    w_mm = rng.normal(size=(3, 5))
    run("matmul", {"m1": m1, "m2": m2}, lambda: _weighted(nc.matmul(m1, m2), w_mm), LINEAR_TOL)

    v1 = nc.parameter(rng.normal(size=6))
    v2 = nc.parameter(rng.normal(size=6))
    run("dot", {"v1": v1, "v2": v2}, lambda: nc.scale(nc.dot(v1, v2), 0.9), LINEAR_TOL)

    c1 = nc.parameter(rng.normal(size=(4, 2)))
    c2 = nc.parameter(rng.normal(size=(4, 5)))
    w_cc = rng.normal(size=(4, 7))
    run(
        "concat_cols",
        {"c1": c1, "c2": c2},
        lambda: _weighted(nc.concat_cols(c1, c2), w_cc),
        LINEAR_TOL,
    )

    r = nc.parameter(rng.normal(size=(4, 6)))
    w_r = rng.normal(size=(3, 8))
    run("reshape", {"r": r}, lambda: _weighted(nc.reshape(r, (3, 8)), w_r), LINEAR_TOL)

    table = nc.parameter(rng.normal(size=(7, 3)))
    idx = np.array([0, 3, 3, 6, 1])  # repeated row: backward must scatter-add
    w_g = rng.normal(size=(5, 3))
    run(
        "gather_rows",
        {"table": table},
        lambda: _weighted(nc.gather_rows(table, idx), w_g),
        LINEAR_TOL,
    )

    s1 = nc.parameter(rng.normal(size=()))
    s2 = nc.parameter(rng.normal(size=()))
    s3 = nc.parameter(rng.normal(size=()))
    w_s = rng.normal(size=3)
    run(
        "stack_scalars",
        {"s1": s1, "s2": s2, "s3": s3},
        lambda: _weighted(nc.stack_scalars([s1, s2, s3]), w_s),
        LINEAR_TOL,
    )
    vec = nc.parameter(rng.normal(size=5))
    run("pick", {"vec": vec}, lambda: nc.scale(nc.pick(vec, 3), 1.3), LINEAR_TOL)
    run("sum_all", {"a": a}, lambda: nc.sum_all(a), LINEAR_TOL)
    w_mr = rng.normal(size=3)
    run("mean_rows", {"a": a}, lambda: _weighted(nc.mean_rows(a), w_mr), LINEAR_TOL)

    x_relu = nc.parameter(_away_from_zero(rng, (4, 3)))
    run("relu", {"x": x_relu}, lambda: _weighted(nc.relu(x_relu), w), LINEAR_TOL)

    sm = nc.parameter(rng.normal(size=(4, 5)))
    w_sm = rng.normal(size=(4, 5))
    run("softmax_rows", {"x": sm}, lambda: _weighted(nc.softmax_rows(sm), w_sm), NONLINEAR_TOL)

    ln_x = nc.parameter(rng.normal(size=(4, 6)))
    ln_g = nc.parameter(rng.uniform(0.5, 1.5, size=6))
    ln_b = nc.parameter(rng.normal(size=6))
    w_ln = rng.normal(size=(4, 6))
    run(
        "layer_norm",
        {"x": ln_x, "gain": ln_g, "bias": ln_b},
        lambda: _weighted(nc.layer_norm(ln_x, ln_g, ln_b), w_ln),
        NONLINEAR_TOL,
    )

    lv = nc.parameter(rng.normal(size=7))
    run("logsumexp", {"v": lv}, lambda: nc.scale(nc.logsumexp(lv), 1.1), NONLINEAR_TOL)

    nv = nc.parameter(rng.normal(size=6) + 0.5)
    w_n = rng.normal(size=6)
    run("l2_normalize", {"v": nv}, lambda: _weighted(nc.l2_normalize(nv), w_n), NONLINEAR_TOL)

    omega = nc.parameter(rng.uniform(0.1, 2.0, size=4))
    values = rng.uniform(-3.0, 3.0, size=5)
    w_te = rng.normal(size=(5, 8))
    run(
        "trig_encode",
        {"omega": omega},
        lambda: _weighted(nc.trig_encode(omega, values), w_te),
        NONLINEAR_TOL,
    )

    logits = nc.parameter(rng.normal(size=(5, 4)))
    labels = np.array([0, 2, 1, 3, 2])
    run(
        "cross_entropy_mean",
        {"logits": logits},
        lambda: nc.scale(nc.cross_entropy_mean(logits, labels), 1.5),
        NONLINEAR_TOL,
    )

    d, heads = 8, 2
    mha_params = {
        "query": nc.parameter(rng.normal(size=(2, d))),
        "kv": nc.parameter(rng.normal(size=(5, d))),
        "wq": nc.parameter(rng.normal(size=(d, d)) * 0.5),
        "bq": nc.parameter(rng.normal(size=d) * 0.1),
        "wk": nc.parameter(rng.normal(size=(d, d)) * 0.5),
        "bk": nc.parameter(rng.normal(size=d) * 0.1),
        "wv": nc.parameter(rng.normal(size=(d, d)) * 0.5),
        "bv": nc.parameter(rng.normal(size=d) * 0.1),
        "wo": nc.parameter(rng.normal(size=(d, d)) * 0.5),
        "bo": nc.parameter(rng.normal(size=d) * 0.1),
    }
    w_mha = rng.normal(size=(2, d))
    run(
        "multi_head_attention",
        mha_params,
        lambda: _weighted(
            nc.multi_head_attention(
                mha_params["query"],
                mha_params["kv"],
                mha_params["kv"],
                mha_params["wq"],
                mha_params["bq"],
                mha_params["wk"],
                mha_params["bk"],
                mha_params["wv"],
                mha_params["bv"],
                mha_params["wo"],
                mha_params["bo"],
                heads,
            ),
            w_mha,
        ),
        NONLINEAR_TOL,
    )

    ffn_params = {
        "x": nc.parameter(rng.normal(size=(3, 4))),
        "w1": nc.parameter(rng.normal(size=(4, 6)) * 0.7),
        "b1": nc.parameter(rng.normal(size=6) * 0.3),
        "w2": nc.parameter(rng.normal(size=(6, 4)) * 0.7),
        "b2": nc.parameter(rng.normal(size=4) * 0.3),
    }
    w_ffn = rng.normal(size=(3, 4))
    run(
        "feed_forward",
        ffn_params,
        lambda: _weighted(
            nc.feed_forward(
                ffn_params["x"],
                ffn_params["w1"],
                ffn_params["b1"],
                ffn_params["w2"],
                ffn_params["b2"],
            ),
            w_ffn,
        ),
        NONLINEAR_TOL,
    )

    nce = {
        "q": nc.parameter(rng.normal(size=6)),
        "p": nc.parameter(rng.normal(size=6)),
        "k1": nc.parameter(rng.normal(size=6)),
        "k2": nc.parameter(rng.normal(size=6)),
    }
    run(
        "info_nce",
        nce,
        lambda: info_nce(nce["q"], nce["p"], [nce["k1"], nce["k2"]], temperature=0.7),
        NONLINEAR_TOL,
    )
    return results


def _toy_trajectory(rng: np.random.Generator, traj_id: str, n: int, n_locations: int) -> Trajectory:
    t = np.cumsum(rng.uniform(0.5, 2.0, size=n)) + 3.0
    return Trajectory(
        traj_id,
        t,
        rng.uniform(-1.5, 1.5, size=n),
        rng.uniform(-1.5, 1.5, size=n),
        rng.integers(0, n_locations, size=n),
    )


def composed_model_check(seed: int = 13, step: float = DEFAULT_STEP) -> CheckResult:
    """Full encoder + InfoNCE loss on a 3-pair toy batch, FD on every parameter."""
    rng = np.random.default_rng(seed)
    config = enc.EncoderConfig(
        n_locations=12, d_l=8, anchor_lengths=(2,), n_heads=2, ffn_hidden=16
    )
    params = enc.init_params(config, rng)
    trajs = [_toy_trajectory(rng, f"t{i}", n, config.n_locations) for i, n in enumerate((6, 7, 5))]
    pairs = [two_hop_split(traj) for traj in trajs]
    refs = assign_negatives(len(pairs), n_neg=2, rng=rng)
    tc = TrainConfig(batch_size=4, n_neg=2, temperature=0.07)

    def loss_fn():
        return batch_loss(params, config, pairs, refs, tc)

    return check("encoder_info_nce", loss_fn, params, NONLINEAR_TOL, step)


def full_suite(seed: int = 13, step: float = DEFAULT_STEP) -> list[CheckResult]:
    return operator_suite(seed, step) + [composed_model_check(seed, step)]
