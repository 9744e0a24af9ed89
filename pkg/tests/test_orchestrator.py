import json

import numpy as np
import pytest
import torch

from conftest import tiny_config
from trafficgan import orchestrator
from trafficgan.checkpoint import load_tensors
from trafficgan.metrics import CSV_HEADER, read_metric_rows
from trafficgan.orchestrator import (
    RunConfig,
    RunError,
    TemplatePool,
    adversarial_epoch,
    discriminator_plateaued,
    evaluate_run,
    latest_checkpoint,
    pretrain_phase,
    read_manifest,
    restore_state,
    run_experiment,
    select_positions,
)
from trafficgan.packet_model import Granularity


def _cfg(**overrides) -> RunConfig:
    return RunConfig.from_config(tiny_config(**overrides))


def test_run_writes_metrics_checkpoints_and_manifest(tmp_path):
    metrics = run_experiment(_cfg(), tmp_path)
    assert metrics.read_text().splitlines()[0] == ",".join(CSV_HEADER)
    rows = read_metric_rows(metrics)
    assert [r.epoch for r in rows] == [1, 2]
    for row in rows:
        assert row.nids_kind == "dt"
        assert row.mu == 4
        assert row.embedding_mode == "one_byte"
        assert row.afr + row.asr == 100.0
        assert row.mape >= 0.0

    manifest = read_manifest(tmp_path)
    assert manifest["status"] == "COMPLETED"
    assert manifest["epoch"] == 2
    assert manifest["mask_positions"] == [8, 9, 10, 11]
    assert manifest["config"]["run.seed"] == 11
    assert set(manifest["nids_fingerprints"]) == {"dt"}
    assert len(manifest["epoch_seconds"]) == 2

    ckpt = tmp_path / "checkpoints"
    for name in ("epoch_0000", "epoch_0001", "epoch_0002", "best"):
        assert (ckpt / f"{name}.atkg").exists()
        assert (ckpt / f"{name}.json").exists()
    assert (ckpt / "embedding.atkg").exists()
    assert (ckpt / "nids_dt.joblib").exists()
    assert latest_checkpoint(tmp_path) == 2
    best = json.loads((ckpt / "best.json").read_text())
    assert best["best"]["afr"] == min(r.afr for r in rows)


def test_runs_are_reproducible(tmp_path):
    first = run_experiment(_cfg(), tmp_path / "a").read_text()
    second = run_experiment(_cfg(), tmp_path / "b").read_text()
    assert first == second


def test_resume_matches_uninterrupted_run(tmp_path):
    straight = run_experiment(_cfg(), tmp_path / "straight")
    run_experiment(_cfg(**{"run.epochs": 1}), tmp_path / "resumed")
    resumed = run_experiment(_cfg(), tmp_path / "resumed", resume=True)
    assert resumed.read_text() == straight.read_text()

    a = load_tensors(tmp_path / "straight" / "checkpoints" / "epoch_0002.atkg", "run")
    b = load_tensors(tmp_path / "resumed" / "checkpoints" / "epoch_0002.atkg", "run")
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert read_manifest(tmp_path / "resumed")["status"] == "COMPLETED"


def test_restore_state_rebuilds_the_epoch(tmp_path):
    run_experiment(_cfg(**{"run.epochs": 1}), tmp_path)
    state = restore_state(_cfg(), tmp_path)
    assert state.epoch == 1
    assert [r.epoch for r in state.history] == [1]
    assert state.gen_opt.state
    fresh = restore_state(_cfg(), tmp_path, "epoch_0000")
    assert fresh.epoch == 0 and not fresh.gen_opt.state
    with pytest.raises(RunError):
        restore_state(_cfg(), tmp_path / "elsewhere")


def test_epoch_leaves_the_detector_untouched():
    state = pretrain_phase(_cfg())
    before = state.nids.fingerprint()
    adversarial_epoch(state)
    assert state.epoch == 1
    assert state.nids.fingerprint() == before


def test_failed_epoch_rolls_back(monkeypatch):
    state = pretrain_phase(_cfg())
    params = {k: v.clone() for k, v in state.gen.state_dict().items()}
    disc_params = {k: v.clone() for k, v in state.disc.state_dict().items()}

    def explode(*args, **kwargs):
        raise RuntimeError("evaluation failed")

    monkeypatch.setattr(orchestrator, "evaluate_generator", explode)
    with pytest.raises(RuntimeError, match="evaluation failed"):
        adversarial_epoch(state)
    assert state.epoch == 0
    assert state.history == []
    assert not state.gen_opt.state
    assert all(torch.equal(v, params[k]) for k, v in state.gen.state_dict().items())
    assert all(torch.equal(v, disc_params[k]) for k, v in state.disc.state_dict().items())


def test_failed_run_marks_manifest(tmp_path, monkeypatch):
    def explode(state, cfg=None):
        raise RuntimeError("boom")

    monkeypatch.setattr(orchestrator, "adversarial_epoch", explode)
    with pytest.raises(RuntimeError):
        run_experiment(_cfg(), tmp_path)
    manifest = read_manifest(tmp_path)
    assert manifest["status"] == "FAILED"
    assert "boom" in manifest["error"]


def test_two_byte_run(tmp_path):
    rows = read_metric_rows(run_experiment(_cfg(**{"packet.granularity": "two_byte", "run.epochs": 1}), tmp_path))
    assert len(rows) == 1
    assert rows[0].embedding_mode == "two_byte"
    assert rows[0].mu == 4


def test_extra_detectors_get_their_own_rows(tmp_path):
    rows = read_metric_rows(run_experiment(_cfg(**{"run.epochs": 1, "nids.eval_kinds": ["lr"]}), tmp_path))
    assert [r.nids_kind for r in rows] == ["dt", "lr"]
    assert (tmp_path / "checkpoints" / "nids_lr.joblib").exists()


def test_explicit_mask_positions(tmp_path):
    cfg = _cfg(**{"run.epochs": 1, "mask.mu": 2, "mask.positions": [12, 3]})
    run_experiment(cfg, tmp_path)
    assert read_manifest(tmp_path)["mask_positions"] == [3, 12]


def test_evaluate_run(tmp_path):
    run_experiment(_cfg(), tmp_path)
    target = evaluate_run(tmp_path, "best", count=8, seed=5)
    payload = json.loads(target.read_text())
    assert payload["checkpoint"] == "best"
    assert payload["count"] == 8
    assert payload["records"][0]["nids_kind"] == "dt"
    again = json.loads(evaluate_run(tmp_path, "best", count=8, seed=5).read_text())
    assert again == payload


def test_evaluate_run_needs_a_manifest(tmp_path):
    with pytest.raises(RunError):
        evaluate_run(tmp_path)


def test_select_positions():
    assert select_positions([5, 1, 7, 2], 2, Granularity.ONE_BYTE) == (1, 5)
    assert select_positions([5, 1, 7, 2], 0, Granularity.ONE_BYTE) == ()
    assert select_positions([5, 1, 7, 2], 4, Granularity.TWO_BYTE) == (0, 1, 4, 5)


def test_template_pool_needs_packets():
    with pytest.raises(RunError):
        TemplatePool.build([], [0], Granularity.ONE_BYTE)


@pytest.mark.parametrize(
    "trace,expected",
    [
        ([], False),
        ([5.0, 5.0, 5.0], False),
        ([5.0, 5.0, 5.0, 5.0], True),
        ([9.0, 5.0, 5.001, 5.002, 5.003], True),
        ([9.0, 5.0, 5.001, 5.002], False),
        ([5.0, 5.0, 5.1, 5.1], False),
    ],
)
def test_discriminator_plateau(trace, expected):
    assert discriminator_plateaued(trace) is expected


def test_stream_seeds_are_named():
    cfg = _cfg()
    assert cfg.stream("split") == cfg.stream("split")
    assert cfg.stream("g_step", 1, 0) != cfg.stream("g_step", 1, 1)
    assert _cfg(**{"run.seed": 12}).stream("split") != cfg.stream("split")


def test_lagged_rollout_policy_is_checkpointed_and_resumed(tmp_path):
    cfg = _cfg(**{"rollout.lag": 2})
    straight = run_experiment(cfg, tmp_path / "straight")
    tensors = load_tensors(tmp_path / "straight" / "checkpoints" / "epoch_0001.atkg", "run")
    assert any(key.startswith("rollout/") for key in tensors)

    run_experiment(_cfg(**{"rollout.lag": 2, "run.epochs": 1}), tmp_path / "resumed")
    resumed = run_experiment(cfg, tmp_path / "resumed", resume=True)
    assert resumed.read_text() == straight.read_text()


def test_resume_with_dropout_matches_uninterrupted_run(tmp_path):
    straight = run_experiment(_cfg(**{"discriminator.dropout": 0.25}), tmp_path / "straight")
    run_experiment(_cfg(**{"discriminator.dropout": 0.25, "run.epochs": 1}), tmp_path / "resumed")
    resumed = run_experiment(_cfg(**{"discriminator.dropout": 0.25}), tmp_path / "resumed", resume=True)
    assert resumed.read_text() == straight.read_text()

    a = load_tensors(tmp_path / "straight" / "checkpoints" / "epoch_0002.atkg", "run")
    b = load_tensors(tmp_path / "resumed" / "checkpoints" / "epoch_0002.atkg", "run")
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_restored_discriminator_is_in_eval_mode(tmp_path):
    run_experiment(_cfg(**{"discriminator.dropout": 0.25, "run.epochs": 1}), tmp_path)
    state = restore_state(_cfg(**{"discriminator.dropout": 0.25}), tmp_path)
    assert not state.disc.training
