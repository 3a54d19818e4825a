import numpy as np
import pandas as pd
import pytest
import torch

from models.dem_encoder import parameter_checksum
from models.text_conditioning import get_text_provider
from models.unet_mca import MCAMode
from training.trainer import (
    CHECKPOINT_NAME,
    TRAIN_LOG_NAME,
    CheckpointGenerator,
    GroundTruthGenerator,
    NoiseGenerator,
    TrainConfig,
    Trainer,
    TrainingDivergedError,
    build_optimizer,
    resolve_text_provider,
    evaluate,
    load_model,
    train,
)
from utils.data_pipeline import load_manifest, synthesize_dataset
from utils.run_config import config_to_dict
from utils.tensor_io import load_checkpoint
from tests.conftest import tiny_train_config


def _state_equal(a: dict, b: dict) -> bool:
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


def test_single_step_writes_checkpoint(tmp_path, small_manifest, encoder, text_provider):
    trainer = train(tiny_train_config(max_steps=1), small_manifest, tmp_path, encoder, text_provider)
    assert trainer.step == 1
    assert len(trainer.loss_history) == 1
    payload = load_checkpoint(tmp_path / CHECKPOINT_NAME)
    assert payload["header"]["step"] == 1
    assert payload["header"]["config"]["max_steps"] == 1


def test_zero_learning_rate_leaves_parameters_unchanged(small_manifest, encoder, text_provider):
    trainer = Trainer(tiny_train_config(), small_manifest, encoder=encoder, text_provider=text_provider)
    trainer.optimizer = build_optimizer(trainer.model.trainable_parameters(), lr=0.0, weight_decay=0.01)
    before = parameter_checksum(trainer.model)
    trainer.train_step()
    assert parameter_checksum(trainer.model) == before


def test_weight_decay_is_decoupled():
    param = torch.nn.Parameter(torch.full((4,), 2.0))
    optimizer = build_optimizer([param], lr=0.1, weight_decay=0.5)
    param.grad = torch.zeros_like(param)
    optimizer.step()
    assert torch.allclose(param.detach(), torch.full((4,), 2.0 * (1 - 0.1 * 0.5)))


def test_checkpoint_round_trip_is_bitwise(tmp_path, small_manifest, encoder, text_provider):
    trainer = train(tiny_train_config(max_steps=2), small_manifest, tmp_path, encoder, text_provider)
    model, cfg = load_model(tmp_path / CHECKPOINT_NAME)
    assert _state_equal(model.state_dict(), trainer.model.state_dict())
    assert config_to_dict(cfg) == config_to_dict(trainer.cfg)


def test_corrupt_checkpoint_is_rejected(tmp_path, small_manifest, encoder, text_provider):
    train(tiny_train_config(max_steps=1), small_manifest, tmp_path, encoder, text_provider)
    path = tmp_path / CHECKPOINT_NAME
    payload = torch.load(path, weights_only=True)
    first = next(iter(payload["model"]))
    payload["model"][first] = payload["model"][first] + 1.0
    torch.save(payload, path)
    with pytest.raises(ValueError, match="checksum"):
        load_checkpoint(path)


def test_resume_replays_uninterrupted_run(tmp_path, small_manifest, encoder, text_provider):
    full = train(tiny_train_config(max_steps=4), small_manifest, tmp_path / "full", encoder, text_provider)

    train(tiny_train_config(max_steps=2), small_manifest, tmp_path / "part", encoder, text_provider)
    resumed = Trainer.resume(
        tmp_path / "part" / CHECKPOINT_NAME, small_manifest, max_steps=4,
        encoder=encoder, text_provider=text_provider,
    )
    assert resumed.step == 2
    resumed.fit()

    assert resumed.loss_history == pytest.approx(full.loss_history[2:], abs=1e-6)
    for name, value in full.model.state_dict().items():
        assert torch.allclose(resumed.model.state_dict()[name], value, atol=1e-6)


def test_train_log_columns(tmp_path, small_manifest, encoder, text_provider):
    train(tiny_train_config(max_steps=3), small_manifest, tmp_path, encoder, text_provider)
    log = pd.read_csv(tmp_path / TRAIN_LOG_NAME)
    assert list(log.columns) == ["step", "loss", "lr", "wall_time"]
    assert log["step"].tolist() == [1, 2, 3]
    assert np.isfinite(log["loss"]).all()
    assert log["wall_time"].is_monotonic_increasing


def test_training_is_seeded(small_manifest, encoder, text_provider):
    a = train(tiny_train_config(max_steps=2), small_manifest, None, encoder, text_provider)
    b = train(tiny_train_config(max_steps=2), small_manifest, None, encoder, text_provider)
    c = train(tiny_train_config(max_steps=2, seed=1), small_manifest, None, encoder, text_provider)
    assert a.loss_history == b.loss_history
    assert a.loss_history != c.loss_history


def test_cosine_schedule_decays_to_zero(small_manifest, encoder, text_provider):
    trainer = train(tiny_train_config(max_steps=3, lr_schedule="cosine"), small_manifest, None, encoder, text_provider)
    assert trainer.current_lr() == pytest.approx(0.0, abs=1e-12)


def test_ema_weights_are_stored_and_loadable(tmp_path, small_manifest, encoder, text_provider):
    trainer = train(tiny_train_config(max_steps=2, ema_decay=0.5), small_manifest, tmp_path, encoder, text_provider)
    raw, _ = load_model(tmp_path / CHECKPOINT_NAME)
    averaged, _ = load_model(tmp_path / CHECKPOINT_NAME, use_ema=True)
    assert _state_equal(raw.state_dict(), trainer.model.state_dict())
    assert not _state_equal(raw.state_dict(), averaged.state_dict())


def test_non_finite_loss_aborts_training(tmp_path, small_manifest, encoder, text_provider, monkeypatch):
    def nan_loss(model, x1, cond, generator, step=None):
        return torch.tensor(float("nan"), requires_grad=True)

    monkeypatch.setattr("training.trainer.cfm_loss", nan_loss)
    with pytest.raises(TrainingDivergedError, match="step 0"):
        train(tiny_train_config(), small_manifest, tmp_path, encoder, text_provider)
    assert not (tmp_path / CHECKPOINT_NAME).exists()


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(lr_schedule="step")
    with pytest.raises(ValueError):
        TrainConfig(ema_decay=1.0)


def test_mismatched_encoder_channels_are_rejected(small_manifest, encoder, text_provider):
    cfg = tiny_train_config()
    cfg.unet.dem_channels = (64, 128, 256)
    with pytest.raises(ValueError, match="dem_channels"):
        Trainer(cfg, small_manifest, encoder=encoder, text_provider=text_provider)


def test_mismatched_text_width_is_rejected(small_manifest, encoder):
    cfg = tiny_train_config()
    narrow = get_text_provider("hash", dim=32)
    with pytest.raises(ValueError, match="text_dim 64 does not match"):
        Trainer(cfg, small_manifest, encoder=encoder, text_provider=narrow)
    with pytest.raises(ValueError, match="text_dim"):
        CheckpointGenerator(Trainer(cfg, small_manifest, encoder=encoder).model, cfg, encoder=encoder,
                            text_provider=narrow)
    assert resolve_text_provider(cfg).dim == cfg.unet.text_dim


def test_ground_truth_generator_scores_zero_mse(small_manifest):
    report = evaluate(GroundTruthGenerator(), small_manifest, split="val")
    assert report.mse == 0.0
    assert report.n_tiles == 4
    noise = evaluate(NoiseGenerator(seed=0), small_manifest, split="val")
    assert noise.mse > report.mse


def test_evaluate_is_deterministic(small_manifest, encoder, text_provider):
    trainer = train(tiny_train_config(max_steps=2), small_manifest, None, encoder, text_provider)
    generator = CheckpointGenerator(trainer.model, trainer.cfg, encoder=encoder, text_provider=text_provider)
    first = evaluate(generator, small_manifest, split="val").to_dict()
    second = evaluate(generator, small_manifest, split="val").to_dict()
    assert first == second


def test_evaluate_from_checkpoint_path(tmp_path, small_manifest, encoder, text_provider):
    train(tiny_train_config(max_steps=1), small_manifest, tmp_path, encoder, text_provider)
    report = evaluate(tmp_path / CHECKPOINT_NAME, small_manifest, split="test")
    assert report.n_tiles == 2
    assert np.isfinite(report.mse)
    with pytest.raises(ValueError, match="empty"):
        evaluate(GroundTruthGenerator(), small_manifest, split="holdout")


def test_validation_loss_is_repeatable(small_manifest, encoder, text_provider):
    trainer = train(tiny_train_config(max_steps=1, unet=tiny_train_config(MCAMode.NONE).unet),
                    small_manifest, None, encoder, text_provider)
    assert trainer.validation_loss("val") == trainer.validation_loss("val")


@pytest.mark.slow
def test_smoke_training_halves_the_loss(tmp_path, encoder, text_provider):
    synthesize_dataset(64, ["alpine", "desert", "forest", "coast"], tmp_path / "data", seed=0)
    manifest = load_manifest(tmp_path / "data" / "manifest.json")
    cfg = tiny_train_config(max_steps=2000, batch_size=16, eval_every=500)
    trainer = train(cfg, manifest, tmp_path / "run", encoder, text_provider)
    initial = np.mean(trainer.loss_history[:10])
    final = np.mean(trainer.loss_history[-50:])
    assert final < 0.5 * initial
