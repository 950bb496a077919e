# Copyright (c) 2024 The DetVS Authors
#
# SPDX-License-Identifier: Apache-2.0

"""Unit tests for the detvs.model module."""

# Relax pylint a bit for unit tests.
# pylint: disable=missing-function-docstring


from typing import List

from pathlib import Path
import dataclasses
import math

import numpy as np
import pytest
import torch

from detvs.config import DetVSConfig
from detvs.dataset import (
    Dataset,
    DatasetArrays,
    generate_dataset,
    split_groups,
)
from detvs.errors import NonFiniteError, TrainingDivergedError
from detvs.mph import HeadBank, LossConfig, mph_loss_terms
from detvs.model import (
    VARIANTS,
    CheckpointFile,
    DETModel,
    EpochStats,
    ModelConfig,
    PlainRegressor,
    TrainConfig,
    backward,
    build_model,
    embed_angles,
    evaluate_estimator,
    make_batch,
    predict,
    sinusoidal_embedding_2d,
    tokenize_image,
    train,
)

from .detvs_uthelpers import DetVSTests


BANK = HeadBank.default()
RADII = (0.012, 0.010, 0.008)


@pytest.fixture(scope="module")
def arrays() -> DatasetArrays:
    samples = generate_dataset(
        DetVSTests.get_sample_sim(), BANK, 2, (3, 4), RADII, seed=1
    )
    return Dataset(samples).arrays()


def _tiny_model_config(dtype: str = "float32") -> ModelConfig:
    cfg = DetVSTests.tiny_config()
    cfg.set("model.dtype", dtype)
    return ModelConfig.from_config(cfg)


def test_model_config() -> None:
    mcfg = _tiny_model_config()
    assert mcfg.image_size == 16
    assert mcfg.embed_dim == 16
    assert mcfg.n_tokens == 16
    assert mcfg.torch_dtype == torch.float32

    with pytest.raises(ValueError):
        ModelConfig(embed_dim=18, attn_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(embed_dim=6, attn_heads=2)
    with pytest.raises(ValueError):
        ModelConfig(image_size=48, token_grid=8)
    with pytest.raises(ValueError):
        ModelConfig(image_size=8, token_grid=16)
    with pytest.raises(ValueError):
        ModelConfig(n_heads=0)
    with pytest.raises(ValueError):
        ModelConfig(dtype="float16")
    with pytest.raises(ValueError):
        ModelConfig(activation="tanh")
    assert ModelConfig(activation="gelu").activation == "gelu"

    cfg = DetVSTests.tiny_config()
    cfg.set("scene.image_height", "32")
    with pytest.raises(DetVSConfig.Error):
        ModelConfig.from_config(cfg)
    cfg = DetVSTests.tiny_config()
    cfg.set("model.token_grid", "3")
    with pytest.raises(DetVSConfig.Error):
        ModelConfig.from_config(cfg)


def test_sinusoidal_embedding_2d() -> None:
    pe = sinusoidal_embedding_2d(4, 16)
    assert pe.shape == (16, 16)
    assert pe.dtype == torch.float64
    # Token 0: row 0, column 0.
    assert torch.allclose(pe[0, 0::2], torch.zeros(8, dtype=torch.float64))
    assert torch.allclose(pe[0, 1::2], torch.ones(8, dtype=torch.float64))
    # Row-major: tokens of a row share the row features.
    assert torch.equal(pe[4, :8], pe[7, :8])
    assert torch.equal(pe[1, 8:], pe[5, 8:])
    assert not torch.equal(pe[1], pe[4])
    assert math.isclose(float(pe[1, 8]), math.sin(1.0))
    assert float(pe.abs().max()) <= 1.0


@pytest.mark.parametrize("variant", VARIANTS)
def test_build_model(variant: str) -> None:
    mcfg = _tiny_model_config()
    model = build_model(mcfg, variant, seed=3)
    expected_heads = 4 if variant == "mph" else 1
    assert model.n_heads == expected_heads
    assert isinstance(model, PlainRegressor if variant == "plain" else DETModel)

    head = torch.rand(2, 16, 16, 1)
    torso = torch.rand(2, 16, 16, 1)
    angles = torch.zeros(2, 2)
    out = model(head, torso, angles)
    assert out.distances.shape == (2, expected_heads, 3)
    assert out.logits.shape == (2, expected_heads)
    if variant == "plain":
        assert torch.equal(out.logits, torch.zeros(2, 1))


def test_build_model_seed() -> None:
    mcfg = _tiny_model_config()
    state = torch.get_rng_state()
    a = build_model(mcfg, "mph", seed=4)
    b = build_model(mcfg, "mph", seed=4)
    c = build_model(mcfg, "mph", seed=5)
    # The global random state is left untouched.
    assert torch.equal(state, torch.get_rng_state())
    for (name, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(pa, pb), name
    assert not torch.equal(a.queries, c.queries)

    with pytest.raises(ValueError):
        build_model(mcfg, "cnn")


def test_build_model_float64() -> None:
    model = build_model(_tiny_model_config("float64"), "sph")
    assert all(p.dtype == torch.float64 for p in model.parameters())


def test_model_image_shape() -> None:
    model = build_model(_tiny_model_config(), "mph")
    with pytest.raises(ValueError):
        model(
            torch.rand(1, 32, 32, 1),
            torch.rand(1, 16, 16, 1),
            torch.zeros(1, 2),
        )


def test_model_non_finite() -> None:
    model = build_model(_tiny_model_config(), "mph")
    head = torch.rand(1, 16, 16, 1)
    torso = torch.rand(1, 16, 16, 1)
    angles = torch.tensor([[math.nan, 0.0]])
    with pytest.raises(NonFiniteError) as e:
        model(head, torso, angles)
    assert e.value.layer == 0

    with torch.no_grad():
        model.encoder_layers[0].linear2.bias.fill_(math.inf)
    with pytest.raises(NonFiniteError) as e:
        model(head, torso, torch.zeros(1, 2))
    assert e.value.layer == 1


def test_tokenize_and_embed() -> None:
    model = build_model(_tiny_model_config(), "mph")
    image = np.zeros((16, 16, 1), dtype=np.float32)
    tokens = tokenize_image(model, image, "head")
    assert tokens.shape == (16, 16)
    assert torch.all(torch.isfinite(tokens))
    assert not torch.equal(tokens, tokenize_image(model, image, "torso"))
    assert embed_angles(model, 0.1, -0.2).shape == (16,)


def test_predict() -> None:
    sim = DetVSTests.get_sample_sim()
    task = sim.sample_task(DetVSTests.rng(1))
    obs = sim.render(task.state((0.0, 0.0, 0.01)), DetVSTests.rng(2))
    model = build_model(_tiny_model_config(), "mph")
    out = predict(model, obs)
    assert out.distances.shape == (4, 3)
    assert out.logits.shape == (4,)
    assert not out.distances.requires_grad
    assert torch.equal(out.logits, predict(model, obs).logits)


def test_make_batch(arrays: DatasetArrays) -> None:
    n = len(arrays.d_r)
    batch = make_batch(arrays, BANK)
    assert batch.size == n
    assert batch.d_o.shape == (n, 4, 3)
    assert batch.con_o.shape == (n, 4)
    assert torch.allclose(
        batch.d_r_norm,
        torch.as_tensor(np.linalg.norm(arrays.d_r, axis=1)).float(),
    )
    sub = make_batch(arrays, BANK, torch.float64, np.array([0, 2]))
    assert sub.size == 2
    assert sub.head.dtype == torch.float64


def test_backward_finite_differences(arrays: DatasetArrays) -> None:
    cfg = DetVSTests.tiny_config()
    cfg.set("model.dtype", "float64")
    # Smooth activations: no kinks within the step.
    cfg.set("model.activation", "gelu")
    model = build_model(ModelConfig.from_config(cfg), "mph", seed=6)
    batch = make_batch(arrays, BANK, torch.float64, np.arange(4))
    loss_cfg = LossConfig()
    grads = backward(model, batch, 1.0, BANK, loss_cfg)
    params = dict(model.named_parameters())
    assert set(grads) == set(params)

    def loss() -> float:
        with torch.no_grad():
            pred = model(batch.head, batch.torso, batch.angles)
            terms = mph_loss_terms(
                pred, batch.d_o, batch.con_o, batch.d_r_norm, BANK, loss_cfg
            )
            return float(terms.total.mean())

    # Every parameter tensor at least once, then entries at random.
    rng = DetVSTests.rng(7)
    names = sorted(params)
    numel = np.array([params[n].numel() for n in names], dtype=np.float64)
    picks = names + list(rng.choice(names, 200, p=numel / numel.sum()))
    eps = 1e-6
    for name in picks:
        param = params[name]
        index = tuple(int(rng.integers(d)) for d in param.shape)
        with torch.no_grad():
            param[index] += eps
        plus = loss()
        with torch.no_grad():
            param[index] -= 2 * eps
        minus = loss()
        with torch.no_grad():
            param[index] += eps
        numeric = (plus - minus) / (2 * eps)
        assert float(grads[name][index]) == pytest.approx(
            numeric, rel=1e-4, abs=1e-8
        ), f"{name}{index}"

    # Per-sample adjoints of 1/B match the batch-mean adjoint.
    per_sample = backward(
        model,
        batch,
        torch.full((4,), 0.25, dtype=torch.float64),
        BANK,
        loss_cfg,
    )
    for name, grad in grads.items():
        assert torch.allclose(per_sample[name], grad, atol=1e-12)


def test_train(arrays: DatasetArrays) -> None:
    mcfg = _tiny_model_config()
    tcfg = TrainConfig(epochs=2, batch_size=4)
    seen: List[EpochStats] = []

    model = build_model(mcfg, "mph", seed=7)
    history = train(
        model, arrays, BANK, LossConfig(), tcfg, seed=8, on_epoch=seen.append
    )
    assert [s.epoch for s in history] == [1, 2]
    assert [s.epoch for s in seen] == [1, 2]
    for stats in history:
        assert math.isfinite(stats.loss)
        assert stats.loss == pytest.approx(
            stats.distance_loss + stats.confidence_loss, rel=1e-5
        )

    # Same seeds, same history and parameters.
    again = build_model(mcfg, "mph", seed=7)
    replay = train(again, arrays, BANK, LossConfig(), tcfg, seed=8)
    np.testing.assert_array_equal(
        [dataclasses.astuple(s) for s in replay],
        [dataclasses.astuple(s) for s in history],
    )
    for pa, pb in zip(model.parameters(), again.parameters()):
        assert torch.equal(pa, pb)

    assert not train(model, arrays, BANK, LossConfig(), TrainConfig(epochs=0))
    empty = Dataset([], image_shape=(16, 16, 1)).arrays()
    with pytest.raises(ValueError):
        train(model, empty, BANK, LossConfig(), tcfg)


def test_train_held_out_groups(arrays: DatasetArrays) -> None:
    mcfg = _tiny_model_config()
    tcfg = TrainConfig(
        epochs=2, batch_size=4, close_range=1.0, validation_groups=1
    )
    rest, held = split_groups(arrays, 1)
    assert len(rest.d_r) and len(held.d_r)

    model = build_model(mcfg, "mph", seed=7)
    history = train(model, arrays, BANK, LossConfig(), tcfg, seed=8)
    report = evaluate_estimator(model, held, BANK, 1.0)
    assert history[-1].close_range_error == pytest.approx(
        report.close_range_error
    )

    # The held-out group takes no part in training.
    alone = build_model(mcfg, "mph", seed=7)
    tcfg_all = dataclasses.replace(tcfg, validation_groups=0)
    train(alone, rest, BANK, LossConfig(), tcfg_all, seed=8)
    for pa, pb in zip(model.parameters(), alone.parameters()):
        assert torch.equal(pa, pb)

    with pytest.raises(ValueError):
        train(
            model,
            arrays,
            BANK,
            LossConfig(),
            dataclasses.replace(tcfg, validation_groups=2),
        )


def test_train_diverged(arrays: DatasetArrays) -> None:
    model = build_model(_tiny_model_config(), "sph")
    with torch.no_grad():
        model.confidence.weight.fill_(math.nan)
    with pytest.raises(TrainingDivergedError) as e:
        train(
            model,
            arrays,
            HeadBank.single(),
            LossConfig(),
            TrainConfig(epochs=3, batch_size=4),
        )
    assert e.value.epoch == 1


def test_train_config() -> None:
    tcfg = TrainConfig.from_config(DetVSTests.tiny_config())
    assert (tcfg.epochs, tcfg.batch_size) == (2, 8)
    assert tcfg.close_range == 0.016
    assert tcfg.validation_groups == 0
    bundled = DetVSConfig(DetVSConfig.bundled_file("detvs.ini"))
    assert TrainConfig.from_config(bundled).validation_groups == 4


def test_evaluate_estimator(arrays: DatasetArrays) -> None:
    model = build_model(_tiny_model_config(), "mph")
    report = evaluate_estimator(model, arrays, BANK, batch_size=3)
    n = len(arrays.d_r)
    assert report.count == n
    assert sum(report.head_counts) == n
    assert 0.0 <= report.selection_accuracy <= 1.0
    assert report.mean_error >= 0.0

    empty = Dataset([], image_shape=(16, 16, 1)).arrays()
    report = evaluate_estimator(model, empty, BANK)
    assert report.count == 0
    assert math.isnan(report.mean_error)
    assert report.head_counts == (0, 0, 0, 0)


@pytest.mark.parametrize("variant", VARIANTS)
def test_checkpoint_file(variant: str, tmp_path: Path) -> None:
    model = build_model(_tiny_model_config(), variant, seed=9)
    path = str(tmp_path / f"{variant}.ckpt")
    meta = {"epochs": 2, "dataset_sha256": "ab" * 32}
    sha = CheckpointFile.write(path, model, variant, meta)
    copy = str(tmp_path / "copy.ckpt")
    assert CheckpointFile.write(copy, model, variant, meta) == sha

    ckpt = CheckpointFile.read(path)
    assert ckpt.variant == variant
    assert ckpt.model_config == model.cfg
    assert ckpt.meta == meta
    rebuilt = ckpt.build()
    head = torch.rand(2, 16, 16, 1)
    torso = torch.rand(2, 16, 16, 1)
    angles = torch.rand(2, 2)
    model.eval()
    rebuilt.eval()
    with torch.no_grad():
        expected = model(head, torso, angles)
        actual = rebuilt(head, torso, angles)
    assert torch.equal(expected.distances, actual.distances)
    assert torch.equal(expected.logits, actual.logits)


def test_checkpoint_file_errors(tmp_path: Path) -> None:
    model = build_model(_tiny_model_config(), "sph")
    path = tmp_path / "sph.ckpt"
    CheckpointFile.write(str(path), model, "sph")
    raw = path.read_bytes()

    with pytest.raises(CheckpointFile.Error):
        CheckpointFile.read(str(tmp_path / "missing.ckpt"))

    bad = tmp_path / "bad.ckpt"
    for content in (
        b"NOTACKPT" + raw[8:],
        raw[:8] + b"\x02\x00" + raw[10:],
        raw[: len(raw) // 2],
        raw + b"\x00",
    ):
        bad.write_bytes(content)
        with pytest.raises(CheckpointFile.Error):
            CheckpointFile.read(str(bad))

    with pytest.raises(CheckpointFile.Error):
        CheckpointFile.write(str(tmp_path / "no" / "dir.ckpt"), model, "sph")


def test_checkpoint_config_mismatch(tmp_path: Path) -> None:
    model = build_model(_tiny_model_config(), "mph")
    path = str(tmp_path / "mph.ckpt")
    CheckpointFile.write(path, model, "mph")
    ckpt = CheckpointFile.read(path)
    wrong = dataclasses.replace(
        ckpt, model_config=dataclasses.replace(ckpt.model_config, mlp_hidden=8)
    )
    with pytest.raises(RuntimeError):
        wrong.build()
