import json

import numpy as np
import pytest

from lowbit_adapters import quantizer
from lowbit_adapters.codec import head_payload_bytes, measure_payload, size_estimate, unpack
from lowbit_adapters.harness import experiments as ex
from lowbit_adapters.harness.config import RunConfig
from lowbit_adapters.harness.outputs import write_csv, write_json
from lowbit_adapters.harness.ptq import ptq_model, ptq_tensor
from lowbit_adapters.harness.tasks import TaskSpec, make_task
from lowbit_adapters.quantizer import reconstruct

from conftest import SMALL, small_config

# config


def test_config_json_round_trip_and_stable_hash():
    cfg = small_config()
    again = RunConfig.from_dict(json.loads(cfg.to_json()))
    assert again == cfg
    assert again.hash() == cfg.hash()
    assert len(cfg.hash()) == 16


def test_config_hash_changes_with_any_field():
    cfg = small_config()
    assert cfg.replace(seed=1).hash() != cfg.hash()
    assert cfg.replace(**{"adapter.bits": 2}).hash() != cfg.hash()
    assert cfg.replace(**{"optim.lr": 0.5}).hash() != cfg.hash()


def test_partial_nested_config_keeps_parent_defaults():
    cfg = RunConfig.from_dict({"optim": {"epochs": 3}})
    assert cfg.optim.epochs == 3
    assert cfg.optim.lr == RunConfig().optim.lr


def test_config_rejects_unknown_fields():
    with pytest.raises(ValueError):
        RunConfig.from_dict({"adapter": {"rank": 3}})
    with pytest.raises(KeyError):
        RunConfig().replace(**{"adapter.rank": 3})


def test_config_load(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(SMALL))
    assert RunConfig.load(path) == small_config()


# tasks


def test_task_is_deterministic_and_well_formed():
    spec = TaskSpec(source_train=50, target_train=40, target_val=10, target_test=20)
    a, b = make_task(spec), make_task(spec)
    np.testing.assert_array_equal(a.target_train.x, b.target_train.x)
    assert a.source_train.x.shape == (50, 8, 8, 3)
    assert set(np.unique(a.target_test.y)) <= set(range(spec.target_classes))
    assert not np.array_equal(a.target_train.x[:10], a.target_val.x)


# pre-training


def test_pretrain_deterministic_hash(small):
    cfg, data, art = small
    assert ex.pretrain_source(cfg, data).hash == art.hash


def test_pretrain_zero_epochs_is_near_chance(small):
    cfg, data, _ = small
    art = ex.pretrain_source(cfg.replace(**{"pretrain.epochs": 0}), data)
    assert art.source_accuracy < 0.3


def test_pretrain_threshold_error_has_diagnostics(small):
    cfg, data, _ = small
    with pytest.raises(ex.PretrainError, match="below threshold"):
        ex.pretrain_source(cfg.replace(pretrain_threshold=1.01), data)


def test_backbone_artifact_reloads(small):
    cfg, _, art = small
    again = ex.BackboneArtifact.from_bytes(art.sidecar, cfg)
    for n, t in art.model.params.items():
        np.testing.assert_array_equal(again.model.params[n].data, t.data)
    assert again.hash == art.hash


def test_default_backbone_clears_gate(default_setup):
    _, _, art = default_setup
    assert art.source_accuracy >= 0.90


# QAT / PTQ runs


@pytest.fixture(scope="module")
def small_runs(small):
    cfg, data, art = small
    q1 = ex.run_qat(cfg, art, data)
    fp = ex.run_qat(cfg.replace(**{"adapter.bits": 32}), art, data)
    return q1, fp


def test_qat_report_fields(small, small_runs):
    cfg, _, art = small
    q1, _ = small_runs
    r = q1.report
    assert 0.0 <= r.accuracy <= 1.0
    assert r.method == "qat" and r.bits == 1
    assert set(r.scale_search) == {"1.0", "10.0"}
    assert r.scale == max(cfg.scale_grid, key=lambda s: (r.scale_search[repr(s)], -s))
    assert len(r.loss_curve) == cfg.optim.epochs
    assert r.backbone_hash == art.hash and r.config_hash == cfg.hash()
    assert r.payload_bytes == sum(v for k, v in measure_payload(q1.checkpoint).items() if k != "<head>")
    assert r.payload_bytes == r.payload_estimate_bytes == size_estimate(16, 1, 8, 1, "adaptformer")
    assert r.total_payload_bytes == r.payload_bytes + r.head_bytes
    assert r.file_bytes == len(q1.checkpoint)


def test_qat_is_deterministic(small, small_runs):
    cfg, data, art = small
    again = ex.run_qat(cfg, art, data)
    assert again.report.comparable() == small_runs[0].report.comparable()
    assert again.checkpoint == small_runs[0].checkpoint


def test_reloaded_checkpoint_matches_fake_quant_accuracy(small_runs):
    r = small_runs[0].report
    assert abs(r.accuracy - r.fake_quant_accuracy) <= 0.01


def test_qat_updates_only_adapters_and_head(small, small_runs):
    _, _, art = small
    model = small_runs[0].model
    for n, t in art.model.params.items():
        if not n.startswith("head."):
            np.testing.assert_array_equal(model.params[n].data, t.data)


def test_full_precision_run_never_calls_quantizer(small, monkeypatch):
    cfg, data, art = small

    def boom(*a, **k):
        raise AssertionError("quantizer invoked")

    monkeypatch.setattr(quantizer, "fake_quant_forward", boom)
    r = ex.run_qat(cfg.replace(**{"adapter.bits": 32}), art, data, scale=1.0).report
    assert r.method == "fp" and r.bits == 32


def test_head_quantization_reflected_in_sizes(small):
    cfg, data, art = small
    plain = ex.run_qat(cfg, art, data, scale=1.0)
    headq = ex.run_qat(cfg.replace(**{"adapter.head_bits": 1}), art, data, scale=1.0)
    head = unpack(headq.checkpoint).head
    assert head.bits == 1
    assert headq.report.head_bytes == head_payload_bytes(head) == (10 * 16) // 8 + 8 + 10 * 4
    assert headq.report.total_payload_bytes < plain.report.total_payload_bytes
    assert headq.report.payload_bytes == plain.report.payload_bytes


def test_ptq_noop_path_matches_fp_accuracy(small, small_runs):
    cfg, data, art = small
    fp = small_runs[1]
    r = ex.run_ptq(cfg, fp.model, art, 32, data).report
    assert r.accuracy == fp.report.accuracy


def test_ptq_rejects_quantized_adapters(small, small_runs):
    cfg, data, art = small
    with pytest.raises(ValueError):
        ex.run_ptq(cfg, small_runs[0].model, art, 1, data)


def test_ptq_report_and_sizes(small, small_runs):
    cfg, data, art = small
    r = ex.run_ptq(cfg, small_runs[1].model, art, 2, data).report
    assert r.method == "ptq" and r.bits == 2
    # own codes add a u16 count plus 2**b float32 codes per matrix
    assert r.payload_bytes == r.payload_estimate_bytes + 2 * (2 + 4 * 4)


@pytest.mark.parametrize("bits", [1, 2, 3])
def test_ptq_idempotent_on_quantized_weights(bits):
    w = np.random.default_rng(bits).standard_normal((12, 5))
    once = ptq_tensor(w, bits)
    w1 = reconstruct(once)
    twice = ptq_tensor(w1, bits)
    np.testing.assert_array_equal(once.indices, twice.indices)
    np.testing.assert_allclose(reconstruct(twice), w1, rtol=1e-6, atol=1e-6)


def test_ptq_model_full_precision_is_copy(small_runs):
    fp = small_runs[1].model
    out = ptq_model(fp, 32)
    assert out is not fp
    for n, t in fp.adapters.items():
        np.testing.assert_array_equal(out.adapters[n].data, t.data)


def test_ptq_model_uses_own_codes(small_runs):
    fp = small_runs[1].model
    out = ptq_model(fp, 1)
    for t in out.adapters.values():
        assert len(np.unique(t.data)) <= 2


def test_full_finetune_report(small):
    cfg, data, art = small
    res = ex.run_full_finetune(cfg, art, data)
    r = res.report
    assert r.method == "full" and 0 <= r.accuracy <= 1
    assert r.payload_bytes == r.payload_estimate_bytes == 4 * art.model.parameter_count("backbone")
    changed = [n for n, t in art.model.params.items() if not n.startswith("head.") and not np.array_equal(res.model.params[n].data, t.data)]
    assert changed


# sweeps


def test_budget_rows():
    assert ex.budget_cells(32) == [(32, 1), (8, 4), (4, 8), (2, 16), (1, 32)]


def test_sweep_bitwidth_payloads(small):
    cfg, data, art = small
    cfg = cfg.replace(scale_grid=[1.0], **{"optim.epochs": 1})
    rows = ex.sweep_bitwidth(cfg, art, data, bits=[1, 2, 4, 8, 32])
    sizes = [r["payload_bytes"] for r in rows]
    assert sizes == sorted(sizes) and len(set(sizes)) == 5
    overhead = 2 * 8  # one (mu, sigma) pair per matrix
    for lo, hi in zip(rows[:3], rows[1:4]):
        assert hi["payload_bytes"] - overhead == 2 * (lo["payload_bytes"] - overhead)
    assert all(r["payload_bytes"] == r["payload_estimate_bytes"] for r in rows)


def test_sweep_budget_rows(small):
    cfg, data, art = small
    cfg = cfg.replace(scale_grid=[1.0], **{"optim.epochs": 1})
    rows = ex.sweep_budget(cfg, art, data, budget=32)
    assert [(r["bits"], r["hidden"]) for r in rows] == [(32, 1), (8, 4), (4, 8), (2, 16), (1, 32)]


def test_sweep_blocks(small):
    cfg, data, art = small
    cfg = cfg.replace(scale_grid=[1.0], **{"optim.epochs": 1})
    rows = ex.sweep_blocks(cfg, art, data, block_counts=[1, 4])
    assert rows[1]["payload_bytes"] == rows[0]["payload_bytes"] + 2 * 3 * 8


def test_sweep_noise_zero_ratio_is_baseline(small, small_runs):
    _, data, _ = small
    model = small_runs[1].model
    rows = ex.sweep_noise(model, data.target_val, [0.0, 0.5, 1.0], 2, seed=0)
    assert rows[0]["accuracy"] == ex.accuracy(model, data.target_val)
    assert rows[0]["drop"] == 0.0
    again = ex.sweep_noise(model, data.target_val, [0.0, 0.5, 1.0], 2, seed=0)
    assert again == rows


def test_noise_targets_exclude_head(small_runs):
    names = ex.noise_targets(small_runs[1].model)
    assert names and all("adapter" in n for n in names)


def test_compare_noise(small):
    cfg, data, art = small
    cmp = ex.compare_noise(cfg, art, data, scale=1.0)
    a, f = cmp.drop_at(1.0)
    assert np.isfinite(a) and np.isfinite(f)
    assert [r["sigma_ratio"] for r in cmp.full_rows] == cfg.sweeps.sigma_ratios


# landscape and histograms


def test_landscape_shape_center_and_determinism(small, small_runs):
    _, data, _ = small
    model = small_runs[0].model
    split = ex.Split(data.target_val.x[:40], data.target_val.y[:40])
    rows = ex.scan_landscape(model, split, 10, 0.1, seed=3)
    assert len(rows) == 441
    center = next(r for r in rows if r["alpha"] == 0 and r["beta"] == 0)
    assert center["loss"] == model.evaluate(split.x, split.y)[1]
    small_scan = ex.scan_landscape(model, split, 1, 0.1, seed=3)
    assert small_scan == ex.scan_landscape(model, split, 1, 0.1, seed=3)
    assert small_scan != ex.scan_landscape(model, split, 1, 0.1, seed=4)


def test_landscape_leaves_model_untouched(small_runs, small):
    _, data, _ = small
    model = small_runs[1].model
    before = model.state_dict()
    ex.scan_landscape(model, data.target_val, 1, 0.5, seed=0)
    for n, v in model.state_dict().items():
        np.testing.assert_array_equal(v, before[n])


def test_filter_normalized_rows_match_weight_norms():
    rng = np.random.default_rng(0)
    w = rng.standard_normal((5, 7))
    d = ex._filter_normalized(np.random.default_rng(1), w)
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), np.linalg.norm(w, axis=1))


def test_histograms_fit_gaussian():
    rng = np.random.default_rng(0)
    w = 5.0 + 2.0 * rng.standard_normal((200, 300))
    (h,) = ex.dump_histograms({"w": w}, bins=40)
    assert abs(h["mu"] - 5.0) <= 0.02 * 5.0
    assert abs(h["sigma"] - 2.0) <= 0.02 * 2.0
    assert abs(h["excess_kurtosis"]) < 0.1
    assert sum(h["counts"]) == w.size


def test_histogram_constant_tensor_is_degenerate():
    (h,) = ex.dump_histograms({"c": np.full((3, 4), 1.5)}, bins=7)
    assert h["degenerate"] and h["mu"] is None and h["sigma"] is None
    assert sum(h["counts"]) == 12


# outputs


def test_writers_embed_hash(tmp_path):
    write_csv(tmp_path / "a.csv", [{"x": 1, "y": 0.1}, {"x": 2, "z": [1, 2]}], "abc")
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "config_hash,x,y,z"
    assert all(line.startswith("abc,") for line in lines[1:])
    write_json(tmp_path / "b.json", {"v": np.float64(1.5)}, "abc")
    assert json.loads((tmp_path / "b.json").read_text()) == {"config_hash": "abc", "v": 1.5}
