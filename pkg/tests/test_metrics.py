import csv
import json

import numpy as np
import pytest

from fedreg.data import Dataset, dirichlet_partition
from fedreg.errors import ConfigError
from fedreg.federation import RoundHistory, RoundRecord
from fedreg.metrics import (
    evaluate,
    median_last_k,
    write_heatmap_csv,
    write_report,
    write_rounds_csv,
)
from fedreg.nn.model import Conv, Dense, ModelSpec, Output, init_state
from fedreg.rng import INIT, stream


def spec_and_state(seed=0):
    spec = ModelSpec(input_shape=(1, 4, 4), layers=(Conv(2), Dense(4), Output(3)),
                     extraction_points=(0,), projection_dim=4)
    return spec, init_state(spec, stream(seed, INIT))


def test_evaluate_matches_manual_argmax():
    spec, state = spec_and_state()
    rng = np.random.default_rng(0)
    ds = Dataset(rng.integers(0, 256, size=(40, 1, 4, 4), dtype=np.uint8),
                 rng.integers(0, 3, size=40), 3)
    from fedreg.data import normalize
    from fedreg.nn.model import forward
    logits, _, _ = forward(spec, state, normalize(ds.images), need_trace=False)
    want = float((np.argmax(logits, axis=1) == ds.labels).mean())
    assert evaluate(spec, state, ds, batch_size=7) == pytest.approx(want, abs=0)


def test_evaluate_tie_breaks_to_lowest_class():
    spec, state = spec_and_state()
    for name, w in state.params.items():
        w[...] = 0.0  # all logits zero -> argmax is class 0 everywhere
    ds = Dataset(np.zeros((6, 1, 4, 4), dtype=np.uint8),
                 np.array([0, 0, 1, 2, 0, 1]), 3)
    assert evaluate(spec, state, ds) == pytest.approx(3 / 6)


def test_evaluate_rejects_empty():
    spec, state = spec_and_state()
    ds = Dataset(np.zeros((0, 1, 4, 4), dtype=np.uint8), np.zeros(0, dtype=int), 3)
    with pytest.raises(ConfigError, match="empty"):
        evaluate(spec, state, ds)


def test_median_last_k():
    assert median_last_k([0.1, 0.2, 0.9, 0.4, 0.5], k=3) == pytest.approx(0.5)
    assert median_last_k([0.1, 0.2], k=10) == pytest.approx(0.15)  # shorter than k
    assert median_last_k([0.7], k=1) == 0.7
    with pytest.raises(ConfigError):
        median_last_k([], k=3)
    with pytest.raises(ConfigError):
        median_last_k([0.1], k=0)


def fake_history():
    return RoundHistory([
        RoundRecord(0, 0.5, 1.25, [0, 2], np.array([0.6, 0.4])),
        RoundRecord(1, 0.75, 0.5, [1, 3], np.array([0.55, 0.45])),
    ])


def test_rounds_csv_layout(tmp_path):
    path = str(tmp_path / "rounds.csv")
    write_rounds_csv(path, fake_history())
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["round", "accuracy", "mean_local_loss", "participants"]
    assert rows[1] == ["0", "0.500000", "1.250000", "0;2"]
    assert rows[2][3] == "1;3"


def test_heatmap_csv_matches_counts(tmp_path):
    labels = np.random.default_rng(0).integers(0, 3, size=50)
    part = dirichlet_partition(labels, 3, 1.0, seed=0, min_client_size=1)
    path = str(tmp_path / "heatmap.csv")
    write_heatmap_csv(path, part, labels, 3)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["client", "class", "count"]
    assert len(rows) == 1 + 3 * 3
    total = sum(int(r[2]) for r in rows[1:])
    assert total == 50


def test_write_report_contents(tmp_path):
    out = str(tmp_path / "run")
    config = {"algorithm": "fedintr", "mu": 1.0}
    report = write_report(out, config, fake_history(), headline_k=2)
    on_disk = json.load(open(f"{out}/report.json"))
    assert on_disk == report
    assert report["config"] == config
    assert report["rounds_completed"] == 2
    assert report["headline_accuracy"] == pytest.approx(0.625)
    assert report["final_accuracy"] == pytest.approx(0.75)
    assert report["best_accuracy"] == pytest.approx(0.75)
    assert report["final_round_alpha"] == pytest.approx([0.55, 0.45])
    assert (tmp_path / "run" / "rounds.csv").exists()
