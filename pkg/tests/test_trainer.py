import json

import numpy as np
import pytest
import torch

from crossview.core.errors import ConfigurationError, UsageError
from crossview.data.images import read_rgb
from crossview.data.manifest import build_dataset
from crossview.evaluation.studies import evaluate_synthesis, ode_step_ablation
from crossview.models.objectives import batch_infonce
from crossview.training import checkpoint
from crossview.training.config import merge, preset
from crossview.training.trainer import (
    LOG_KEYS,
    Trainer,
    _batches,
    joint_finetune,
    load_models,
    map_gradients,
    run_schedule,
    stage_of,
    train_stage1,
    train_stage2,
)
from tests.conftest import SMALL_SIZES, tiny_config


def test_stage_of(config):
    # t1=2, t2=1, t3=2
    assert [stage_of(e, config) for e in range(4)] == [1, 1, 2, 3]


def test_full_schedule_writes_artifacts(config, manifest, tmp_path):
    trainer = run_schedule(config, manifest, tmp_path)
    history = trainer.state.history
    assert [row["stage"] for row in history] == [1, 1, 2, 3]
    assert all(tuple(row) == LOG_KEYS for row in history)

    assert history[0]["L_GL"] is not None and history[0]["L_IG"] is None
    assert history[2]["L_GL"] is None and history[2]["L_IG"] is not None
    assert all(history[3][key] is not None for key in ("L_GL", "L_IG", "L_KL"))
    assert all(0.0 <= row["R@1"] <= 1.0 for row in history)

    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert [json.loads(line)["epoch"] for line in lines] == [0, 1, 2, 3]
    header, _ = checkpoint.load(tmp_path / "final.ckpt")
    assert header["epoch"] == 4
    assert header["fingerprint"] == config.fingerprint()


def test_runs_are_reproducible(config, manifest, tmp_path):
    run_schedule(config, manifest, tmp_path / "a")
    run_schedule(config, manifest, tmp_path / "b")
    assert (tmp_path / "a" / "log.jsonl").read_bytes() == (tmp_path / "b" / "log.jsonl").read_bytes()
    assert (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()


def test_resume_matches_uninterrupted_run(config, manifest, tmp_path):
    run_schedule(config, manifest, tmp_path / "straight")

    interrupted = Trainer(config, manifest, tmp_path / "interrupted")
    interrupted.run(max_epochs=2)
    assert interrupted.state.epoch == 2
    assert not (tmp_path / "interrupted" / "final.ckpt").exists()

    run_schedule(config, manifest, tmp_path / "resumed", resume=tmp_path / "interrupted" / "last.ckpt")
    assert (tmp_path / "resumed" / "final.ckpt").read_bytes() == (tmp_path / "straight" / "final.ckpt").read_bytes()
    assert (tmp_path / "resumed" / "log.jsonl").read_bytes() == (tmp_path / "straight" / "log.jsonl").read_bytes()


def test_resume_rejects_other_configuration(config, manifest, tmp_path):
    trainer = Trainer(config, manifest, tmp_path)
    trainer.save_checkpoint(tmp_path / "start.ckpt")
    other = Trainer(merge(config, {"seed": 1}), manifest)
    with pytest.raises(ConfigurationError):
        other.load_checkpoint(tmp_path / "start.ckpt")


def test_stages_touch_only_their_parameters(config, manifest):
    trainer = Trainer(config, manifest)
    backends = trainer.geomap.backend_hash()
    beta, theta = trainer.state.beta_hash(), trainer.state.theta_hash()

    with pytest.raises(UsageError):
        train_stage2(trainer)

    trainer.run(last_stage=1)
    assert trainer.state.beta_hash() != beta
    assert trainer.state.theta_hash() == theta

    beta = trainer.state.beta_hash()
    train_stage2(trainer)
    assert trainer.state.beta_hash() == beta
    assert trainer.state.theta_hash() != theta

    joint_finetune(trainer)
    assert trainer.state.beta_hash() != beta
    assert trainer.geomap.backend_hash() == backends


def test_changed_backend_is_a_configuration_error(config, manifest):
    trainer = Trainer(config, manifest)
    with torch.no_grad():
        next(trainer.geomap.geometry_backend.parameters()).add_(1.0)
    with pytest.raises(ConfigurationError):
        trainer.run(max_epochs=1)


def test_schedule_guards(config, manifest):
    trainer = Trainer(config, manifest)
    with pytest.raises(UsageError):
        joint_finetune(trainer)
    with pytest.raises(UsageError):
        trainer.run(last_stage=4)
    with pytest.raises(UsageError):
        Trainer(config, manifest.subset("test"))


def test_zero_alpha_reduces_to_retrieval_gradient(config, manifest):
    trainer = Trainer(config, manifest)
    index = torch.arange(4)
    retrieval_only = map_gradients(trainer.state.head, trainer.train_cache, index, config)
    with_zero_kl = map_gradients(trainer.state.head, trainer.train_cache, index, config, alpha=0.0)
    torch.testing.assert_close(with_zero_kl, retrieval_only, rtol=0, atol=1e-7)
    assert float(with_zero_kl.norm()) > 0
    weighted = map_gradients(trainer.state.head, trainer.train_cache, index, config, alpha=1.0)
    assert not torch.allclose(weighted, retrieval_only)


def test_train_stage1_returns_trainer(config, manifest, tmp_path):
    trainer = train_stage1(manifest, config, tmp_path)
    assert trainer.state.epoch == config.t1
    assert (tmp_path / "last.ckpt").exists()


def test_load_models_reproduces_embeddings(config, manifest, tmp_path):
    trainer = run_schedule(config, manifest, tmp_path)
    loaded_config, geomap, flow, digest = load_models(tmp_path / "final.ckpt")
    assert loaded_config == config
    assert digest == checkpoint.file_hash(tmp_path / "final.ckpt")

    entry = manifest.entries[0]
    ground = read_rgb(manifest.ground_path(entry))
    torch.testing.assert_close(geomap.embed_ground(ground), trainer.geomap.embed_ground(ground))
    for a, b in zip(flow.net.parameters(), trainer.state.net.parameters()):
        torch.testing.assert_close(a, b, rtol=0, atol=0)


def test_validation_collapses_shared_satellites(tmp_path):
    manifest = build_dataset(8, seed=0, protocol="many_to_one", out_dir=tmp_path, k=2, **SMALL_SIZES)
    trainer = Trainer(tiny_config(), manifest)
    recall = trainer.validation_recall()
    assert recall is not None and 0.0 <= recall <= 1.0
    assert trainer.mean_kl() >= 0.0


@pytest.mark.slow
def test_stage1_retrieval_reaches_high_recall(tmp_path):
    manifest = build_dataset(512, seed=0, protocol="one_to_one", out_dir=tmp_path / "data")
    config = merge(preset("desk"), {"t1": 50, "t2": 0, "t3": 0, "optimizer": "adam", "lr1": 1e-3})
    trainer = train_stage1(manifest, config)
    assert trainer.validation_recall() >= 0.90




@pytest.mark.slow
def test_geometry_branch_improves_retrieval(tmp_path):
    manifest = build_dataset(512, seed=0, protocol="one_to_one", out_dir=tmp_path / "data")
    config = merge(preset("desk"), {"t1": 50, "t2": 0, "t3": 0, "optimizer": "adam", "lr1": 1e-3})
    with_geometry = train_stage1(manifest, config).validation_recall()
    semantic_only = train_stage1(manifest, merge(config, {"geomap.use_geometry": False})).validation_recall()
    assert with_geometry >= semantic_only + 0.01


@pytest.mark.slow
def test_stage1_loss_drops_within_three_epochs(tmp_path):
    manifest = build_dataset(64, seed=0, protocol="one_to_one", out_dir=tmp_path / "data")
    config = merge(preset("desk"), {"t1": 3, "t2": 0, "t3": 0, "optimizer": "adam", "lr1": 1e-3, "batch_size": 8})
    trainer = Trainer(config, manifest)

    # replay the first batch the schedule will draw
    generator = torch.Generator()
    generator.set_state(trainer.state.generator.get_state())
    index = _batches(len(trainer.train_cache), config.batch_size, generator)[0]
    with torch.no_grad():
        f_g, f_s = trainer.train_cache.embed(trainer.state.head, index)
        first_batch = float(batch_infonce(f_g, f_s, config.loss.tau, config.loss.infonce_symmetric))

    trainer.run(last_stage=1)
    assert trainer.state.history[2]["L_GL"] < first_batch


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    """A desk-scale run trained through stage 2, shared by the slow synthesis tests."""
    root = tmp_path_factory.mktemp("desk")
    manifest = build_dataset(512, seed=0, protocol="one_to_one", out_dir=root / "data")
    config = merge(
        preset("desk"),
        {"t1": 20, "t2": 40, "t3": 60, "optimizer": "adam", "lr1": 1e-3, "lr2": 1e-3, "lr3": 1e-4, "batch_size": 32},
    )
    run_schedule(config, manifest, root / "run", last_stage=2)
    return config, manifest, root / "run" / "final.ckpt"


def _held_out_pairs(manifest, n=64):
    return [
        (read_rgb(manifest.ground_path(e)), read_rgb(manifest.satellite_path(e)))
        for e in manifest.subset("test").entries[:n]
    ]


@pytest.mark.slow
def test_single_direction_synthesizes_both_views(desk_run):
    _, manifest, final = desk_run
    _, geomap, flow, before = load_models(final)
    reports = evaluate_synthesis(_held_out_pairs(manifest), geomap, flow, steps=10)
    assert reports["g2s"].paired_win_rate >= 0.80
    assert reports["s2g"].paired_win_rate >= 0.70
    assert checkpoint.file_hash(final) == before
    assert np.isfinite(reports["g2s"].mse)


@pytest.mark.slow
def test_flow_loss_falls_during_stage2(desk_run):
    header, _ = checkpoint.load(desk_run[2])
    losses = [row["L_IG"] for row in header["history"] if row["stage"] == 2]
    assert losses[-1] < 0.25 * losses[0]


@pytest.mark.slow
def test_more_ode_steps_do_not_increase_error(desk_run):
    _, manifest, final = desk_run
    _, geomap, flow, _ = load_models(final)
    rows = ode_step_ablation(_held_out_pairs(manifest, 16), geomap, flow, steps_list=(2, 5, 10)).rows
    mse2, mse5, mse10 = (row.mse for row in rows)
    assert mse2 >= mse5 >= mse10 * 0.98
    assert abs(mse5 - mse10) <= abs(mse2 - mse10)


@pytest.mark.slow
def test_joint_finetune_tightens_consistency(desk_run):
    config, manifest, final = desk_run
    trainer = Trainer(config, manifest)
    trainer.load_checkpoint(final)
    kl, recall = trainer.mean_kl(), trainer.validation_recall()

    joint_finetune(trainer)
    assert trainer.mean_kl() < kl
    assert trainer.validation_recall() >= recall - 0.01
