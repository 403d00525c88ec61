from __future__ import annotations

import numpy as np
import pytest

from src.errors import ConfigError, KernelBankError, ShapeError
from src.model import ModelConfig, SelfAttention, build_denoiser, build_mcnet, desk_config
from src.optim import Adamax
from src.tensor import Tensor, bce_loss, select_column


def _images(n: int, size: int = 64, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, 256, size=(n, size, size)).astype(np.uint8)


def test_denoiser_parameter_counts():
    dn = build_denoiser(desk_config(), seed=0)
    assert dn.layer1.num_parameters() == 780
    assert dn.layer2.num_parameters() == 751
    assert [name for name, _ in dn.named_parameters()] == [
        "layer1.weight", "layer1.bias", "layer2.weight", "layer2.bias",
    ]


def test_denoiser_shapes_and_constant_input():
    dn = build_denoiser(desk_config(), seed=0)
    assert dn.features(_images(1)).shape == (1, 30, 64, 64)
    assert dn(_images(2)).shape == (2, 1, 64, 64)
    flat = dn.features(np.full((1, 64, 64), 100, dtype=np.uint8)).numpy()
    assert np.allclose(flat[:, :, 2:-2, 2:-2], 0.0, atol=1e-3)


def test_bank_init_needs_thirty_5x5_filters():
    with pytest.raises(KernelBankError):
        build_denoiser(desk_config(dn_filters=20), seed=0)
    build_denoiser(desk_config(dn_filters=20, dn_init="kaiming"), seed=0)


def test_default_shape_propagation():
    cfg = ModelConfig()
    assert cfg.spatial_sizes() == [256, 128, 64, 32, 16]
    assert cfg.block_width == 96
    assert cfg.head_channels == 256
    assert desk_config().head_size() == 4


def test_shallow_models_pool_after_the_last_block():
    cfg = desk_config(depth=2)
    assert cfg.pools_per_block() == {1: 4}
    assert cfg.head_size() == desk_config().head_size()


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(depth=1)
    with pytest.raises(ConfigError):
        ModelConfig(kernel_set=(2,))
    with pytest.raises(ConfigError):
        ModelConfig(activation="swish")
    with pytest.raises(ConfigError):
        ModelConfig(preprocessing="dct")
    cfg = ModelConfig.from_dict(desk_config(kernel_set=[3, 5]).to_dict())
    assert cfg.kernel_set == (3, 5)


def test_tanh_then_relu_schedule():
    cfg = desk_config(activation="tanh_then_relu")
    assert [cfg.activation_for(b) for b in range(1, 7)] == ["tanh", "tanh", "relu", "relu", "relu", "relu"]


def test_forward_batch_of_twenty():
    model = build_mcnet(desk_config(), seed=1)
    probs, features = model(_images(20), return_features=True)
    assert probs.shape == (20, 2)
    assert np.allclose(probs.numpy().sum(axis=1), 1.0, atol=1e-5)
    assert features["block6"].shape == (20, 64, 4, 4)
    assert features["attention"].shape == (20, 64, 4, 4)


def test_eval_forward_is_deterministic():
    model = build_mcnet(desk_config(), seed=2)
    batch = _images(4, seed=3)
    model(batch)
    model.eval()
    first = model(batch).numpy()
    second = model(batch).numpy()
    assert np.array_equal(first, second)


def test_wrong_input_size():
    model = build_mcnet(desk_config(), seed=0)
    with pytest.raises(ShapeError):
        model(_images(2, size=32))


def test_attention_with_closed_gate_is_identity():
    layer = SelfAttention(16, np.random.default_rng(0))
    x = Tensor(np.random.default_rng(1).normal(size=(2, 16, 4, 4)))
    out = layer(x)
    assert np.array_equal(out.numpy(), x.numpy())
    assert layer.last_attention.shape == (2, 16, 16)
    assert np.allclose(layer.last_attention.sum(axis=-1), 1.0)


def test_attention_channels_must_divide_by_eight():
    with pytest.raises(ShapeError):
        SelfAttention(12, np.random.default_rng(0))


def test_denoiser_is_frozen_unless_end_to_end():
    split = build_mcnet(desk_config(), seed=0)
    assert not any(p.requires_grad for p in split.denoiser.parameters())
    joint = build_mcnet(desk_config(end_to_end=True), seed=0)
    assert all(p.requires_grad for p in joint.denoiser.parameters())
    assert len(joint.trainable_parameters()) == len(split.trainable_parameters()) + 4


def _one_step(model) -> None:
    opt = Adamax(model.trainable_parameters(), lr=1e-3)
    probs = model(_images(4, seed=1))
    bce_loss(select_column(probs, 1), np.array([0, 0, 1, 1])).backward()
    opt.step()


def test_one_step_updates_denoiser_only_end_to_end():
    joint = build_mcnet(desk_config(end_to_end=True, preprocessing="learned_dn"), seed=0)
    before = [p.numpy().copy() for p in joint.denoiser.parameters()]
    _one_step(joint)
    assert all(not np.array_equal(p.numpy(), b) for p, b in zip(joint.denoiser.parameters(), before))

    split = build_mcnet(desk_config(), seed=0)
    before = [p.numpy().copy() for p in split.denoiser.parameters()]
    _one_step(split)
    assert all(np.array_equal(p.numpy(), b) for p, b in zip(split.denoiser.parameters(), before))


def test_preprocessing_variants():
    fixed = build_mcnet(desk_config(preprocessing="kv", depth=3, attention=False), seed=0)
    assert fixed.trainable_parameters() == fixed.parameters()
    assert fixed(_images(2)).shape == (2, 2)
    raw = build_mcnet(desk_config(preprocessing="none", depth=3), seed=0)
    assert raw.blocks[0].branches[0].weight.shape[1] == 1


def test_same_seed_same_weights():
    a = build_mcnet(desk_config(), seed=5).state_dict()
    b = build_mcnet(desk_config(), seed=5).state_dict()
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)
