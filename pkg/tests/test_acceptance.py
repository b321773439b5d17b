"""Acceptance gate: eleven pass/fail criteria, one test per criterion.

Each test emits one `ACCEPTANCE <n> PASS/FAIL` line with the measured
numbers, printed past pytest's capture so it shows up in any run mode.

Oracles here are deliberately independent re-implementations (dense numpy
attention, explicit alignment-path enumeration, loop-based metrics); they
share no code with the library paths they certify. Trained-model criteria
share module-scoped fixtures to keep the suite's runtime in check.
"""

import math
import time
from dataclasses import replace
from functools import lru_cache

import numpy as np
import pytest

from cstte import downstream as ds
from cstte import encoder as enc
from cstte import numcore as nc
from cstte import pretrain
from cstte import synthgen
from cstte import trajdata as td
from cstte.augment import two_hop_split
from cstte.cli import EXIT_OK, main
from cstte.gradcheck import LINEAR_TOL, NONLINEAR_TOL, full_suite
from cstte.pretrain import TrainConfig, info_nce
from cstte.trajdata import Trajectory

# frozen independent evaluations of the contrastive loss (see test_pretrain)
LN3 = 1.0986122886681098
NEAR_ZERO_GAP20 = 4.1223072363804075e-09  # log1p(2 * exp(-20))
LOSING_GAP20 = 20.000000004122306  # 20 + log1p(2 * exp(-20))


_CAPTURE_MANAGER = None


@pytest.fixture(scope="module", autouse=True)
def _deterministic_mode(request):
    global _CAPTURE_MANAGER
    _CAPTURE_MANAGER = request.config.pluginmanager.getplugin("capturemanager")
    nc.set_deterministic(True)
    yield
    nc.set_deterministic(True)


def announce(criterion: int, ok: bool, detail: str) -> None:
    line = f"ACCEPTANCE {criterion} {'PASS' if ok else 'FAIL'}: {detail}"
    if _CAPTURE_MANAGER is not None:
        with _CAPTURE_MANAGER.global_and_fixture_disabled():
            print(f"\n{line}", flush=True)
    else:
        print(line, flush=True)
    assert ok, f"criterion {criterion}: {detail}"


def constant_vec(*values) -> nc.DiffArray:
    return nc.constant(np.array(values, dtype=np.float64))


# ---------------------------------------------------------------------------
# 1. gradient correctness
# ---------------------------------------------------------------------------


def test_criterion_01_gradient_correctness():
    assert LINEAR_TOL == 1e-6 and NONLINEAR_TOL == 1e-4
    t0 = time.perf_counter()
    results = full_suite(seed=13, step=1e-5)
    elapsed = time.perf_counter() - t0
    assert any(r.name == "encoder_info_nce" for r in results)
    failed = [r.name for r in results if not r.passed]
    worst = max(results, key=lambda r: r.max_rel_error / r.tolerance)
    announce(
        1,
        not failed and elapsed <= 60.0,
        f"{len(results)} finite-difference checks in {elapsed:.1f}s, worst "
        f"{worst.name} rel {worst.max_rel_error:.2e} (tol {worst.tolerance:.0e})"
        + (f"; FAILED {failed}" if failed else ""),
    )


# ---------------------------------------------------------------------------
# 2. trig encoding dot products depend only on the value difference
# ---------------------------------------------------------------------------


def test_criterion_02_trig_dot_product_shift_invariance():
    rng = np.random.default_rng(202)
    worst_pair = 0.0
    worst_closed = 0.0
    for _ in range(1000):
        m = int(rng.integers(1, 9))
        omega_values = 10.0 ** rng.uniform(-3.0, 0.5, size=m)
        omega = nc.constant(omega_values)
        v1, v2 = rng.uniform(-500.0, 500.0, size=2)
        delta = rng.uniform(-200.0, 200.0)
        dot1 = float(enc.psi(omega, v1).data @ enc.psi(omega, v1 + delta).data)
        dot2 = float(enc.psi(omega, v2).data @ enc.psi(omega, v2 + delta).data)
        closed_form = float(np.cos(omega_values * delta).sum())
        worst_pair = max(worst_pair, abs(dot1 - dot2))
        worst_closed = max(
            worst_closed, abs(dot1 - closed_form), abs(dot2 - closed_form)
        )
    announce(
        2,
        worst_pair <= 1e-9 and worst_closed <= 1e-9,
        f"1000 draws: max pair gap {worst_pair:.2e}, max closed-form gap "
        f"{worst_closed:.2e} (tol 1e-9)",
    )


# ---------------------------------------------------------------------------
# 3. contrastive loss analytic values
# ---------------------------------------------------------------------------


def test_criterion_03_info_nce_analytic_values():
    gaps = []
    # all-equal similarities, any temperature: uniform over 3 candidates
    for tau in (1.0, 0.07):
        loss = info_nce(
            constant_vec(0.0, 0.0),
            constant_vec(0.0, 1.0),
            [constant_vec(1.0, 0.0), constant_vec(1.0, 1.0)],
            temperature=tau,
        )
        gaps.append(abs(float(loss.data) - LN3))
    # positive dominates by 20 nats
    loss = info_nce(
        constant_vec(1.0), constant_vec(20.0),
        [constant_vec(0.0), constant_vec(0.0)], temperature=1.0,
    )
    gaps.append(abs(float(loss.data) - NEAR_ZERO_GAP20))
    # one negative dominates by 20 nats
    loss = info_nce(
        constant_vec(1.0), constant_vec(0.0),
        [constant_vec(20.0), constant_vec(0.0)], temperature=1.0,
    )
    gaps.append(abs(float(loss.data) - LOSING_GAP20))
    announce(
        3,
        max(gaps) <= 1e-9,
        f"ln3 + two 20-nat-gap cases: max deviation {max(gaps):.2e} (tol 1e-9)",
    )


# ---------------------------------------------------------------------------
# 4. induced attention vs dense oracle + permutation invariance
# ---------------------------------------------------------------------------


def _np_layer_norm(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def _np_induced_attention(arr, prefix, x, n_heads):
    anchor = arr[f"{prefix}.anchor"]
    q = anchor @ arr[f"{prefix}.attn.wq"] + arr[f"{prefix}.attn.bq"]
    k = x @ arr[f"{prefix}.attn.wk"] + arr[f"{prefix}.attn.bk"]
    v = x @ arr[f"{prefix}.attn.wv"] + arr[f"{prefix}.attn.bv"]
    dh = q.shape[1] // n_heads
    heads = []
    for h in range(n_heads):
        qh, kh, vh = (m[:, h * dh : (h + 1) * dh] for m in (q, k, v))
        scores = qh @ kh.T / np.sqrt(dh)
        scores = scores - scores.max(axis=1, keepdims=True)
        w = np.exp(scores)
        w = w / w.sum(axis=1, keepdims=True)
        heads.append(w @ vh)
    att = np.concatenate(heads, axis=1) @ arr[f"{prefix}.attn.wo"]
    att = att + arr[f"{prefix}.attn.bo"]
    h = _np_layer_norm(
        anchor + att, arr[f"{prefix}.norm1.gain"], arr[f"{prefix}.norm1.bias"]
    )
    hidden = np.maximum(h @ arr[f"{prefix}.ffn.w1"] + arr[f"{prefix}.ffn.b1"], 0.0)
    ff = hidden @ arr[f"{prefix}.ffn.w2"] + arr[f"{prefix}.ffn.b2"]
    return _np_layer_norm(
        h + ff, arr[f"{prefix}.norm2.gain"], arr[f"{prefix}.norm2.bias"]
    )


def test_criterion_04_attention_oracle_and_permutation_invariance():
    rng = np.random.default_rng(404)
    worst = 0.0
    bit_exact = True
    for _ in range(50):
        n_heads = int(rng.choice([1, 2, 4]))
        d_l = n_heads * int(rng.integers(2, 5)) * 2  # even, divisible by heads
        config = enc.EncoderConfig(
            n_locations=5,
            d_l=d_l,
            anchor_lengths=(int(rng.integers(1, 5)),),
            n_heads=n_heads,
            ffn_hidden=int(rng.integers(3, 9)),
            use_coords=False,
        )
        params = enc.init_params(config, rng)
        x = rng.normal(size=(int(rng.integers(2, 11)), d_l))
        out = enc.induced_attention(params, "layer0", nc.constant(x), n_heads).data
        ref = _np_induced_attention(
            {name: p.data for name, p in params.items()}, "layer0", x, n_heads
        )
        worst = max(worst, float(np.max(np.abs(out - ref))))
        permuted = enc.induced_attention(
            params, "layer0", nc.constant(x[rng.permutation(len(x))]), n_heads
        ).data
        bit_exact = bit_exact and bool(np.array_equal(out, permuted))
    announce(
        4,
        worst <= 1e-10 and bit_exact,
        f"50 instances: max oracle gap {worst:.2e} (tol 1e-10), "
        f"row-permutation bit-exact: {bit_exact}",
    )


# ---------------------------------------------------------------------------
# 5. two-hop sampler structure for every length 4..200
# ---------------------------------------------------------------------------


def test_criterion_05_two_hop_structure_all_lengths():
    for n in range(4, 201):
        traj = Trajectory(
            "s",
            60.0 * np.arange(n),
            np.linspace(0.0, 1.0, n),
            np.linspace(1.0, 0.0, n),
            np.arange(n) % 7,
        )
        pair = two_hop_split(traj)
        q = np.rint(pair.query.t / 60.0).astype(int)
        p = np.rint(pair.positive.t / 60.0).astype(int)
        assert not set(q) & set(p), f"n={n}: views overlap"
        assert sorted(set(q) | set(p)) == list(range(n)), f"n={n}: union broken"
        assert list(q) == sorted(q) and list(p) == sorted(p), f"n={n}: order broken"
        sides = ["q" if i in set(q) else "p" for i in range(n)]
        expected = ["q", "p"] * (n // 2) + (["q"] if n % 2 else [])
        assert sides == expected, f"n={n}: not interleaved"
    announce(5, True, "lengths 4..200: disjoint, interleaved, order-preserving, "
                      "union complete")


# ---------------------------------------------------------------------------
# 6. alignment distance vs brute-force path enumeration
# ---------------------------------------------------------------------------


def _alignment_brute_force(a, b):
    n, m = len(a), len(b)
    best = [math.inf]

    def cost(i, j):
        dx = a[i][0] - b[j][0]
        dy = a[i][1] - b[j][1]
        return math.sqrt(dx * dx + dy * dy)

    def walk(i, j, acc):
        acc = acc + cost(i, j)
        if i == n - 1 and j == m - 1:
            best[0] = min(best[0], acc)
            return
        if i + 1 < n:
            walk(i + 1, j, acc)
        if j + 1 < m:
            walk(i, j + 1, acc)
        if i + 1 < n and j + 1 < m:
            walk(i + 1, j + 1, acc)

    walk(0, 0, 0.0)
    return best[0]


def test_criterion_06_dtw_matches_path_enumeration():
    rng = np.random.default_rng(606)
    exact = 0
    for _ in range(200):
        a = rng.normal(size=(int(rng.integers(1, 7)), 2))
        b = rng.normal(size=(int(rng.integers(1, 7)), 2))
        if ds.dtw_distance(a, b) == _alignment_brute_force(a, b):
            exact += 1
    announce(6, exact == 200, f"{exact}/200 random pairs (lengths <= 6) agree exactly")


# ---------------------------------------------------------------------------
# 7. ranking metrics vs loop-based oracle
# ---------------------------------------------------------------------------


def test_criterion_07_metric_oracle_equivalence():
    rng = np.random.default_rng(707)
    agreed = 0
    for _ in range(100):
        n = int(rng.integers(5, 41))
        k = int(rng.integers(3, 31))
        logits = rng.normal(size=(n, k))
        labels = rng.integers(0, k, size=n)
        got = ds.destination_eval(logits, labels)

        order = np.argsort(-logits, axis=1, kind="stable")
        ranks = [int(np.where(order[i] == labels[i])[0][0]) + 1 for i in range(n)]
        acc_ok = all(
            got.acc_at[lvl] == sum(r <= lvl for r in ranks) / n
            for lvl in (1, 5, 10, 20)
        )
        preds = [int(row[0]) for row in order]
        f1_values = []
        for cls in sorted(set(labels.tolist()) | set(preds)):
            tp = sum(1 for t, p in zip(labels, preds) if t == cls and p == cls)
            fp = sum(1 for t, p in zip(labels, preds) if t != cls and p == cls)
            fn = sum(1 for t, p in zip(labels, preds) if t == cls and p != cls)
            f1_values.append(2 * tp / (2 * tp + fp + fn))
        f1_ok = got.macro_f1 == sum(f1_values) / len(f1_values)
        agreed += int(acc_ok and f1_ok)
    announce(7, agreed == 100, f"{agreed}/100 random tables match exactly")


# ---------------------------------------------------------------------------
# 8. synthetic end-to-end margins (full-size dataset)
# ---------------------------------------------------------------------------


def test_criterion_08_synthetic_end_to_end():
    t0 = time.perf_counter()
    cfg = synthgen.SynthConfig()  # 2000 trajectories, seed 42
    assert cfg.n_trajectories == 2000 and cfg.seed == 42
    trajs, _ = synthgen.generate(cfg)
    grid = cfg.grid()
    split = td.chronological_split(trajs)
    norm, train_n = td.normalize_features(split.train)
    val_n = [norm.apply(t) for t in split.val]

    enc_cfg = enc.EncoderConfig(
        n_locations=grid.n_cells, d_l=16, anchor_lengths=(4,), n_heads=2,
        ffn_hidden=32,
    )
    train_cfg = TrainConfig(max_epochs=8, patience=3, seed=42)
    ckpt, history = pretrain.train(train_n, val_n, enc_cfg, train_cfg, norm)
    assert len(history) <= 20

    # (a) similar-trajectory search
    sets = ds.build_search_sets(split.test)
    embed_fn = ds.checkpoint_embedder(ckpt)
    enc_search = ds.search_eval(embed_fn, sets).metrics.acc_at[1]
    mean_base = ds.MeanBaseline(enc_cfg, norm, seed=42)
    mean_search = ds.search_eval(mean_base.embed, sets).metrics.acc_at[1]
    random_expectation = 1.0 / len(sets.odd_set)

    # (b) destination prediction; the mean baseline's protocol trains its
    # pooling map end to end on the task, so the encoder gets the matching
    # end-to-end treatment via the fine-tune flag
    trunc_train, lab_train = ds.destination_dataset(split.train)
    trunc_val, lab_val = ds.destination_dataset(split.val)
    trunc_test, lab_test = ds.destination_dataset(split.test)
    head_cfg = ds.HeadConfig(
        learning_rate=0.01, batch_size=128, max_epochs=25, patience=6,
        fine_tune=True,
    )
    tuned, head = ds.fine_tune_destination(
        ckpt, trunc_train, lab_train, trunc_val, lab_val, grid.n_cells,
        head_cfg, seed=42,
    )
    tuned_ckpt = replace(
        ckpt, params={k: v for k, v in tuned.items() if not k.startswith("head.")}
    )
    emb_test = ds.embedding_matrix(ds.checkpoint_embedder(tuned_ckpt), trunc_test)
    enc_dest = ds.destination_eval(head.predict_logits(emb_test), lab_test).acc_at[1]

    mean_dest_model = ds.train_mean_destination(
        mean_base,
        mean_base.feature_matrix(trunc_train), lab_train,
        mean_base.feature_matrix(trunc_val), lab_val,
        grid.n_cells, head_cfg, seed=42,
    )
    mean_dest = ds.destination_eval(
        mean_dest_model.predict_logits(mean_base.feature_matrix(trunc_test)),
        lab_test,
    ).acc_at[1]
    majority = ds.majority_class_rate(lab_test)
    elapsed = time.perf_counter() - t0

    search_ok = enc_search >= mean_search + 0.10 and enc_search > 20 * random_expectation
    dest_ok = enc_dest >= 3 * majority and enc_dest > mean_dest
    announce(
        8,
        search_ok and dest_ok and elapsed <= 900.0,
        f"search acc@1 {enc_search:.3f} vs mean {mean_search:.3f} (+10pp bar "
        f"{mean_search + 0.10:.3f}) and 20x-random bar {20 * random_expectation:.3f}; "
        f"destination acc@1 {enc_dest:.3f} vs 3x-majority bar {3 * majority:.3f} "
        f"and mean {mean_dest:.3f}; wall {elapsed:.0f}s (budget 900s)",
    )


# ---------------------------------------------------------------------------
# 9 + 11b. reduced benchmark shared by the directional comparisons
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def bench():
    cfg = synthgen.SynthConfig(n_trajectories=600)
    trajs, _ = synthgen.generate(cfg)
    grid = cfg.grid()
    split = td.chronological_split(trajs)
    norm, train_n = td.normalize_features(split.train)
    val_n = [norm.apply(t) for t in split.val]
    sets = ds.build_search_sets(split.test)

    @lru_cache(maxsize=None)
    def search_acc5(sampler: str, seed: int, flags: tuple) -> float:
        enc_cfg = enc.EncoderConfig(
            n_locations=grid.n_cells, d_l=16, anchor_lengths=(4,), n_heads=2,
            ffn_hidden=32, **dict(flags),
        )
        tc = TrainConfig(max_epochs=6, patience=6, seed=seed, augmentation=sampler)
        ckpt, _ = pretrain.train(train_n, val_n, enc_cfg, tc, norm)
        return ds.search_eval(ds.checkpoint_embedder(ckpt), sets).metrics.acc_at[5]

    return search_acc5


SEEDS = (0, 1, 2)


def test_criterion_09_two_hop_beats_random_sampler(bench):
    two_hop = float(np.mean([bench("two_hop", s, ()) for s in SEEDS]))
    random_split = float(np.mean([bench("random", s, ()) for s in SEEDS]))
    announce(
        9,
        two_hop >= random_split,
        f"search acc@5 over seeds {SEEDS}: two-hop {two_hop:.3f} >= "
        f"random-split {random_split:.3f}",
    )


# ---------------------------------------------------------------------------
# 10. bit-identical metric files on a fixed-seed pipeline replay
# ---------------------------------------------------------------------------

REPLAY_CONFIG = """
seed = 5

[synthgen]
n_trajectories = 70
points_min = 12
points_max = 18

[trajdata]
min_length = 10

[encoder]
d_l = 16
n_heads = 2
ffn_hidden = 32
anchor_lengths = [2]

[pretrain]
batch_size = 16
max_epochs = 2
patience = 2

[downstream]
max_epochs = 4
patience = 2
"""


def _run_pipeline(root, config_path) -> dict[str, bytes]:
    def cmd(*argv):
        assert main([*argv, "--config", str(config_path), "--output-dir", str(root),
                     "--deterministic"]) == EXIT_OK

    cmd("synth", "--run-name", "s")
    cmd("preprocess", "--run-name", "p", "--dataset", str(root / "s" / "synthetic.csv"))
    cmd("pretrain", "--run-name", "t", "--processed", str(root / "p" / "processed.csv"))
    cmd("embed", "--run-name", "e", "--checkpoint", str(root / "t" / "model.ckpt"),
        "--processed", str(root / "p" / "processed.csv"))
    cmd("eval-search", "--run-name", "es", "--method", "encoder",
        "--checkpoint", str(root / "t" / "model.ckpt"),
        "--processed", str(root / "p" / "processed.csv"))
    cmd("eval-dest", "--run-name", "ed", "--method", "encoder",
        "--checkpoint", str(root / "t" / "model.ckpt"),
        "--processed", str(root / "p" / "processed.csv"))
    tracked = [
        "s/dataset.kv", "s/synthetic.csv",
        "p/dataset.kv", "p/processed.csv",
        "t/training.kv", "t/model.ckpt", "t/model.meta.json",
        "e/embeddings.csv", "e/embeddings.bin", "e/dataset.kv",
        "es/metrics.kv", "ed/metrics.kv",
    ]
    return {rel: (root / rel).read_bytes() for rel in tracked}


def test_criterion_10_fixed_seed_replay_is_bit_identical(tmp_path):
    config_path = tmp_path / "run.toml"
    config_path.write_text(REPLAY_CONFIG)
    first = _run_pipeline(tmp_path / "one", config_path)
    second = _run_pipeline(tmp_path / "two", config_path)
    differing = [rel for rel in first if first[rel] != second[rel]]
    announce(
        10,
        not differing,
        f"{len(first)} pipeline artifacts byte-identical across two runs"
        + (f"; DIFFER: {differing}" if differing else ""),
    )


# ---------------------------------------------------------------------------
# 11. encoding ablations: exact time invariance + directional quality
# ---------------------------------------------------------------------------


def test_criterion_11_encoding_ablations(bench):
    # (a) with the time features disabled, timestamps cannot influence output
    config = enc.EncoderConfig(
        n_locations=9, d_l=8, anchor_lengths=(3,), n_heads=2, ffn_hidden=6,
        use_time=False,
    )
    rng = np.random.default_rng(1111)
    params = enc.init_params(config, rng)
    lon, lat = rng.uniform(-1, 1, 7), rng.uniform(-1, 1, 7)
    loc = rng.integers(0, 9, 7)
    a = Trajectory("a", np.sort(rng.uniform(0, 100, 7)), lon, lat, loc)
    b = Trajectory("b", np.sort(rng.uniform(0, 100, 7)), lon, lat, loc)
    time_invariant = bool(
        np.array_equal(
            enc.encode_trajectory(params, config, a).data,
            enc.encode_trajectory(params, config, b).data,
        )
    )

    # (b) the full model's search quality bounds each single-flag ablation
    full = float(np.mean([bench("two_hop", s, ()) for s in SEEDS]))
    ablations = {
        "no_time": float(np.mean(
            [bench("two_hop", s, (("use_time", False),)) for s in SEEDS]
        )),
        "no_coords": float(np.mean(
            [bench("two_hop", s, (("use_coords", False),)) for s in SEEDS]
        )),
        "no_location": float(np.mean(
            [bench("two_hop", s, (("use_location", False),)) for s in SEEDS]
        )),
    }
    directional = all(full >= v for v in ablations.values())
    announce(
        11,
        time_invariant and directional,
        f"time-disabled output exactly timestamp-invariant: {time_invariant}; "
        f"search acc@5 full {full:.3f} vs " +
        ", ".join(f"{k} {v:.3f}" for k, v in ablations.items()),
    )
