import json
import math

import numpy as np
import pytest

from lossbench import harness as H
from lossbench.metrics import METRIC_IDS, MetricVector, ProbeConfig

TOY = "synthetic:n=30,classes=2,d_in=8,p_in=0.3,p_out=0.02,seed=0"

SMALL = dict(embed_dim=8, hidden_dim=8, d_h=16, attention_heads=2, pe_dim=3, sample_size=3,
             anchor_count=16, probe_epochs=20, probe_repeats=2, knn_k=3)


def small_config(**kw):
    return H.ExperimentConfig(**{**SMALL, **kw})


# early stopping

def test_strictly_improving_runs_all_epochs():
    stop = H.EarlyStopping(patience=10)
    halted = [stop.update(500.0 - e) for e in range(500)]
    assert not any(halted) and stop.epoch == 500


def test_flat_loss_stops_at_patience_plus_one():
    stop = H.EarlyStopping(patience=10)
    while not stop.update(1.0):
        pass
    assert stop.epoch == 11


def test_zero_learning_rate_stops_at_patience_plus_one():
    cfg = small_config(lr=0.0, epochs=50, patience=4)
    res = H.train(cfg, H.load_dataset(TOY), "GCN", "PMI_L", 1)
    assert res.epochs_run == 5
    assert len(set(res.curve)) == 1


def test_gin_cross_entropy_descends():
    cfg = small_config(epochs=40, patience=40, lr=0.01)
    res = H.train(cfg, H.load_dataset(TOY), "GIN", "CrossE_L", 1)
    assert not res.flags
    assert res.curve[-1] < res.curve[0]


def test_train_is_deterministic():
    cfg = small_config(epochs=5)
    g = H.load_dataset(TOY)
    a = H.train(cfg, g, "SAGE", "Contr_l + PR_L", 2)
    b = H.train(cfg, g, "SAGE", "Contr_l + PR_L", 2)
    assert a.curve == b.curve and a.Z.tobytes() == b.Z.tobytes()


# aggregation

def _run(seed, values):
    return H.SeedRun(seed, MetricVector(dict(zip(METRIC_IDS, values))), [])


def test_single_seed_std_zero():
    agg = H.aggregate_runs([_run(1, np.arange(21.0))])
    assert all(v == 0.0 for v in agg.std.values())
    assert agg.mean["rankme"] == 20.0


def test_injected_three_seed_mean_std():
    runs = [_run(s, np.full(21, v)) for s, v in ((1, 2.0), (2, 4.0), (3, 9.0))]
    agg = H.aggregate_runs(runs)
    # mean 5, population variance (9 + 1 + 16) / 3
    assert agg.mean["silhouette"] == 5.0
    assert agg.std["silhouette"] == pytest.approx(math.sqrt(26 / 3), abs=1e-12)


def test_inductive_on_same_graph_matches_transductive():
    cfg = small_config(epochs=3)
    g = H.load_dataset(TOY)
    a = H.run_transductive(cfg, g, "GCN", "CrossE_L", [1])
    b = H.run_inductive(cfg, g, g, "GCN", "CrossE_L", [1])
    assert np.array_equal([a.mean[m] for m in METRIC_IDS], [b.mean[m] for m in METRIC_IDS], equal_nan=True)


def test_inductive_key():
    assert H.inductive_key("Cora", "Citeseer") == "Cora ↓ Citeseer"


# config

def test_config_rejects_bad_values():
    with pytest.raises(ValueError):
        H.ExperimentConfig(epochs=0)
    with pytest.raises(ValueError):
        H.ExperimentConfig(patience=0)
    with pytest.raises(ValueError):
        H.ExperimentConfig(strict_protocol=True, embed_dim=64)
    with pytest.raises(ValueError):
        H.ExperimentConfig(setting="inductive", pairs=[["cora", "cora"]])


def test_config_json_and_toml(tmp_path):
    j = tmp_path / "c.json"
    j.write_text(json.dumps({"epochs": 7, "seeds": [3]}))
    t = tmp_path / "c.toml"
    t.write_text('epochs = 7\nseeds = [3]\n')
    assert H.load_config(j) == H.load_config(t)
    assert H.load_config(j).epochs == 7
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"epochz": 7}))
    with pytest.raises(ValueError, match="epochz"):
        H.load_config(bad)


def test_probe_config_from_experiment():
    pc = small_config().probe_config()
    assert isinstance(pc, ProbeConfig) and pc.lr == 0.01 and pc.knn_k == 3


# datasets

def test_missing_named_dataset(tmp_path, monkeypatch):
    monkeypatch.setenv(H.DATA_DIR_ENV, str(tmp_path))
    with pytest.raises(H.DatasetNotFound, match=H.DATA_DIR_ENV):
        H.load_dataset("pubmedx")


def test_named_dataset_from_data_dir(tmp_path, monkeypatch):
    d = tmp_path / "cora"
    d.mkdir()
    (d / "nodes.tsv").write_text("a\t1\t0\tx\nb\t0\t1\ty\nc\t1\t1\tx\n")
    (d / "edges.tsv").write_text("a\tb\nb\tc\n")
    monkeypatch.setenv(H.DATA_DIR_ENV, str(tmp_path))
    H._LOADED.clear()
    try:
        g = H.load_dataset("cora")
    finally:
        H._LOADED.clear()
    assert g.n == 3 and g.num_edges == 2 and g.d_in == 2


def test_synthetic_dataset_spec():
    g = H.load_dataset(TOY)
    assert g.n == 30 and g.num_classes == 2


# matrix

def test_full_matrix_cell_count():
    cfg = H.ExperimentConfig(seeds=[1])
    assert len(H.matrix_cells(cfg)) == 7 * 31


def test_inductive_cells_use_pair_keys():
    cfg = H.ExperimentConfig(setting="inductive", pairs=[["cora", "citeseer"]], seeds=[1],
                             architectures=["GCN"], losses=["PMI_L"])
    (cell,) = H.matrix_cells(cfg)
    assert cell.dataset_name == "cora ↓ citeseer"


def test_cell_hash_tracks_config():
    cfg = small_config()
    cell = H.Cell("GCN", "PMI_L", TOY, None, 1)
    assert H.cell_hash(cfg, cell) == H.cell_hash(small_config(), cell)
    assert H.cell_hash(cfg, cell) != H.cell_hash(small_config(lr=0.02), cell)
    assert H.cell_hash(cfg, cell) != H.cell_hash(cfg, H.Cell("GCN", "PMI_L", TOY, None, 2))


def mini_config():
    return small_config(datasets=[TOY], architectures=["GCN", "GIN"], losses=["CrossE_L", "PMI_L"],
                        seeds=[1], epochs=3)


def test_matrix_resume_and_byte_identity(tmp_path):
    cfg = mini_config()
    st1 = H.MatrixStats()
    first = H.run_matrix(cfg, cache_dir=tmp_path / "a", stats=st1).to_csv_text()
    assert (st1.computed, st1.cached) == (4, 0)
    # drop one cached cell to mimic an interrupted run
    victim = sorted((tmp_path / "a").glob("*.json"))[0]
    victim.unlink()
    st2 = H.MatrixStats()
    resumed = H.run_matrix(cfg, cache_dir=tmp_path / "a", stats=st2).to_csv_text()
    assert (st2.computed, st2.cached) == (1, 3)
    fresh = H.run_matrix(cfg, cache_dir=tmp_path / "b").to_csv_text()
    assert first.encode() == resumed.encode() == fresh.encode()
    assert len(first.strip().splitlines()) == 5


def test_failed_cell_is_reported_not_fatal(tmp_path, monkeypatch):
    monkeypatch.setenv(H.DATA_DIR_ENV, str(tmp_path))
    cfg = small_config(datasets=["nowhere"], architectures=["GCN"], losses=["PMI_L"], seeds=[1], epochs=1)
    table = H.run_matrix(cfg, use_cache=False)
    (row,) = table.rows
    assert "cell_failed(DatasetNotFound" in row.flags
    assert all(math.isnan(v) for v in row.values.values())


def test_inductive_transfer_across_feature_widths():
    # stand-in for the citation pair: 1433 input features in, 3703 out, 128-dim embeddings
    pre = H.load_dataset("synthetic:n=50,classes=3,d_in=1433,seed=1")
    app = H.load_dataset("synthetic:n=70,classes=3,d_in=3703,seed=2")
    cfg = H.ExperimentConfig(epochs=2, probe_epochs=10, probe_repeats=2, knn_k=3, anchor_count=16)
    tr = H.train(cfg, pre, "GCN", "CrossE_L", 1)
    Z = H.apply_encoder(cfg, "GCN", tr.params, app, 1)
    assert Z.shape == (70, 128)
    mv = H.evaluate_all(Z, app, cfg.probe_config(), 1)
    assert [m for m in METRIC_IDS if math.isnan(mv[m])] == []
