"""Metric files, text summaries, and figure rendering."""

import numpy as np
import pytest

import cstte.report as rpt
from cstte.downstream import EvalMetrics, RankingResult
from cstte.errors import DataError
from cstte.pretrain import EpochStats
from cstte.trajdata import Trajectory


def sample_metrics():
    return EvalMetrics(acc_at={1: 0.5, 5: 0.75, 10: 0.875, 20: 1.0}, macro_f1=0.4)


def sample_ranking():
    ids = [f"q{i}" for i in range(4)]
    rng = np.random.default_rng(0)
    order = np.stack([rng.permutation(4) for _ in ids])
    return RankingResult(
        query_ids=ids,
        candidate_ids=ids,
        order=order,
        true_ranks={q: i + 1 for i, q in enumerate(ids)},
        metrics=sample_metrics(),
    )


def sample_history():
    return [
        EpochStats(1, 1.10, 1.05, 2.0),
        EpochStats(2, 0.80, 0.90, 2.1),
        EpochStats(3, 0.60, 0.85, 1.9),
    ]


# ---------------------------------------------------------------------------
# key=value files
# ---------------------------------------------------------------------------


def test_kv_write_and_read_roundtrip(tmp_path):
    path = tmp_path / "m.kv"
    rpt.write_metrics_kv(
        path, {"task": "search", "acc_at_1": 0.125, "n_queries": 8, "flag": True}
    )
    text = path.read_text()
    assert text == "task=search\nacc_at_1=0.125\nn_queries=8\nflag=true\n"
    back = rpt.read_metrics_kv(path)
    assert back == {"task": "search", "acc_at_1": "0.125", "n_queries": "8", "flag": "true"}
    assert float(back["acc_at_1"]) == 0.125


def test_kv_floats_roundtrip_exactly(tmp_path):
    value = 1.2470025012589758e-11
    path = rpt.write_metrics_kv(tmp_path / "m.kv", {"x": value, "y": np.float64(0.1)})
    back = rpt.read_metrics_kv(path)
    assert float(back["x"]) == value
    assert float(back["y"]) == 0.1


def test_kv_identical_bytes_for_identical_metrics(tmp_path):
    metrics = {"acc_at_1": 0.3333333333333333, "macro_f1": 0.2857142857142857}
    a = rpt.write_metrics_kv(tmp_path / "a.kv", metrics)
    b = rpt.write_metrics_kv(tmp_path / "b.kv", metrics)
    assert a.read_bytes() == b.read_bytes()


def test_kv_rejects_unserializable_key(tmp_path):
    with pytest.raises(DataError):
        rpt.write_metrics_kv(tmp_path / "m.kv", {"a=b": 1})


def test_kv_read_rejects_malformed_line(tmp_path):
    path = tmp_path / "m.kv"
    path.write_text("fine=1\nbroken line\n")
    with pytest.raises(DataError):
        rpt.read_metrics_kv(path)


def test_metrics_to_kv_merges_extras_first():
    kv = rpt.metrics_to_kv(sample_metrics(), extra={"method": "dtw"})
    assert list(kv) == ["method", "acc_at_1", "acc_at_5", "acc_at_10", "acc_at_20", "macro_f1"]
    assert kv["acc_at_20"] == 1.0


# ---------------------------------------------------------------------------
# text summaries
# ---------------------------------------------------------------------------


def test_eval_report_layout():
    text = rpt.format_eval_report(
        "similar-trajectory search", "encoder", sample_metrics(), 45, 12.5,
        notes=["majority_rate: 0.1000"],
    )
    lines = text.splitlines()
    assert lines[0] == "task: similar-trajectory search"
    assert lines[1] == "method: encoder"
    assert "acc_at_1: 0.5000" in lines
    assert "macro_f1: 0.4000" in lines
    assert "majority_rate: 0.1000" in lines
    assert lines[-1] == "wall_seconds: 12.50"


def test_training_report_layout():
    text = rpt.format_training_report(sample_history(), best_epoch=3, best_val=0.85, wall_seconds=6.0)
    assert "epochs_run: 3" in text
    assert "best_epoch: 3" in text
    assert "best_val_loss: 0.850000" in text
    assert text.endswith("wall_seconds: 6.00\n")


# ---------------------------------------------------------------------------
# figures
# ---------------------------------------------------------------------------


def _assert_png(path):
    data = path.read_bytes()
    assert data[:8] == b"\x89PNG\r\n\x1a\n"
    assert len(data) > 1000


def test_loss_curve_figure(tmp_path):
    path = rpt.loss_curve_figure(sample_history(), tmp_path / "loss.png")
    _assert_png(path)


def test_metric_bars_figure(tmp_path):
    per_method = {"encoder": sample_metrics(), "dtw": sample_metrics(), "mean": sample_metrics()}
    path = rpt.metric_bars_figure(per_method, tmp_path / "bars.png", title="search")
    _assert_png(path)
    with pytest.raises(DataError):
        rpt.metric_bars_figure({}, tmp_path / "empty.png")


def test_rank_histogram_figure(tmp_path):
    path = rpt.rank_histogram_figure(sample_ranking(), tmp_path / "ranks.png")
    _assert_png(path)


def test_dataset_overview_figure(tmp_path):
    rng = np.random.default_rng(1)
    trajs = [
        Trajectory(
            f"t{i}",
            np.arange(5.0),
            116.3 + np.cumsum(rng.normal(0, 0.001, 5)),
            39.9 + np.cumsum(rng.normal(0, 0.001, 5)),
        )
        for i in range(6)
    ]
    path = rpt.dataset_overview_figure(trajs, tmp_path / "overview.png", title="toy")
    _assert_png(path)
