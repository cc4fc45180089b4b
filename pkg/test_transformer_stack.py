"""
Tests for blocks, full models, twins and checkpoints
"""

import numpy as np
import pytest

from exceptions import CapacityError, CheckpointError, ConfigError, ContractError, InputError
from positional_encodings import urpe_param_count
from tensor_engine import Tensor, backward, cross_entropy, no_grad
from transformer_stack import (
    FFNParams,
    ModelConfig,
    TransformerModel,
    block_forward,
    build_twin,
    ffn,
    load_checkpoint,
    model_forward,
    no_decay,
    save_checkpoint,
)

F64 = "float64"


def small_model(variant="rpe", **kwargs):
    settings = dict(L=2, H=2, d=6, d_H=3, r=8, vocab_in=5, vocab_out=4, n_max=6, dtype=F64, seed=3)
    settings.update(kwargs)
    return TransformerModel(ModelConfig.for_variant(variant, **settings))


def silence_sublayers(model):
    for block in model.blocks:
        for hp in block.attn.heads:
            hp.W_V.data[:] = 0.0
        block.ffn.W_2.data[:] = 0.0


# FFN

def test_zero_ffn_is_identity():
    X = Tensor(np.random.default_rng(0).normal(size=(4, 3)))
    assert np.array_equal(ffn(X, FFNParams.zeros(3, 5, dtype=F64)).data, X.data)


def test_ffn_acts_row_by_row():
    rng = np.random.default_rng(1)
    p = FFNParams.initialize(3, 5, rng, dtype=F64)
    X = rng.normal(size=(4, 3))
    out = ffn(Tensor(X), p).data
    for i in range(4):
        expected = X[i] + np.maximum(X[i] @ p.W_1.data, 0.0) @ p.W_2.data
        np.testing.assert_allclose(out[i], expected, rtol=0, atol=1e-14)


def test_ffn_keeps_identical_rows_identical():
    p = FFNParams.initialize(3, 5, np.random.default_rng(2), dtype=F64)
    out = ffn(Tensor(np.tile([0.3, -1.0, 2.0], (5, 1))), p).data
    assert np.array_equal(out, np.tile(out[0], (5, 1)))


# blocks

def test_block_with_silent_sublayers_is_identity():
    model = small_model()
    silence_sublayers(model)
    X = Tensor(np.random.default_rng(4).normal(size=(5, 6)))
    assert np.array_equal(block_forward(X, 0, model).data, X.data)


def test_block_index_is_checked():
    model = small_model()
    with pytest.raises(ContractError):
        block_forward(Tensor(np.zeros((3, 6))), 2, model)


def test_layer_shared_carriers_and_per_layer_shaw():
    model = small_model("urpe")
    assert model.blocks[0].pe.urpe is model.blocks[1].pe.urpe is model.urpe
    assert model.blocks[0].pe.toeplitz is model.blocks[1].pe.toeplitz
    shaw = small_model("urpe-shaw")
    assert shaw.blocks[0].pe.shaw[0] is not shaw.blocks[1].pe.shaw[0]


def test_changing_c_changes_every_layer():
    model = small_model("urpe")
    X = Tensor(np.random.default_rng(5).normal(size=(5, 6)))
    before = [block_forward(X, layer, model).data.copy() for layer in range(2)]
    model.urpe.per_head[0].set_offset(1, 0.25)
    after = [block_forward(X, layer, model).data for layer in range(2)]
    for old, new in zip(before, after):
        assert not np.array_equal(old, new)


def test_two_layer_forward_composes_blocks():
    model = small_model()
    tokens = np.array([0, 3, 1, 4])
    X = Tensor(model.embedding.data[tokens])
    X = block_forward(block_forward(X, 0, model), 1, model)
    expected = X.data @ model.head_W.data + model.head_b.data
    np.testing.assert_allclose(model_forward(tokens, model).data, expected, rtol=0, atol=1e-13)


# full model

def test_forward_is_deterministic_for_a_seed():
    tokens = np.array([[1, 2, 3, 0], [4, 4, 0, 1]])
    a = model_forward(tokens, small_model("urpe")).data
    b = model_forward(tokens, small_model("urpe")).data
    assert np.array_equal(a, b)
    assert a.shape == (2, 4, 4)


def test_model_without_positions_is_permutation_equivariant():
    model = small_model("none")
    tokens = np.array([0, 1, 2, 3, 4, 2])
    perm = np.random.default_rng(6).permutation(6)
    out = model_forward(tokens, model).data
    np.testing.assert_allclose(model_forward(tokens[perm], model).data, out[perm], rtol=0, atol=1e-12)


@pytest.mark.parametrize("variant", ["none", "rpe", "shaw"])
def test_constant_tokens_give_identical_rows(variant):
    model = small_model(variant)
    rng = np.random.default_rng(7)
    for p in model.toeplitz:
        p.values.data[:] = rng.normal(size=p.values.shape)
    for block in model.blocks:
        for p in block.pe.shaw:
            p.rel_vectors.data[:] = rng.normal(size=p.rel_vectors.shape)
    out = model_forward(np.full(6, 2), model).data
    np.testing.assert_allclose(out, np.tile(out[0], (6, 1)), rtol=0, atol=1e-12)


def test_upper_triangular_c_breaks_collapse():
    model = small_model("urpe")
    for p in model.urpe.per_head:
        for k in range(1, 6):
            p.set_offset(k, 0.0)
    out = model_forward(np.full(6, 2), model).data
    assert np.min(np.abs(out[0] - out[-1])) > 0.0


def test_token_validation():
    model = small_model()
    with pytest.raises(InputError):
        model_forward(np.array([0, 5]), model)
    with pytest.raises(InputError):
        model_forward(np.array([0.0, 1.0]), model)
    with pytest.raises(InputError):
        model_forward(np.zeros((2, 2, 2), dtype=int), model)
    with pytest.raises(CapacityError):
        model_forward(np.zeros(7, dtype=int), model)


def test_empty_batch_passes_through():
    model = small_model()
    with no_grad():
        out = model_forward(np.zeros((0, 4), dtype=np.int64), model)
    assert out.shape == (0, 4, model.config.vocab_out)


def test_silent_sublayers_reduce_to_head_of_embedding():
    model = small_model("urpe")
    silence_sublayers(model)
    tokens = np.array([4, 0, 2])
    expected = model.embedding.data[tokens] @ model.head_W.data + model.head_b.data
    np.testing.assert_allclose(model_forward(tokens, model).data, expected, rtol=0, atol=1e-14)


@pytest.mark.parametrize("variant", ["urpe", "urpe-shaw", "ape"])
def test_every_parameter_receives_gradient(variant):
    model = small_model(variant, use_norm=True)
    rng = np.random.default_rng(8)
    for block in model.blocks:
        for p in block.pe.shaw:
            p.rel_vectors.data[:] = rng.normal(0.0, 0.1, size=p.rel_vectors.shape)
    tokens = rng.integers(0, 5, size=(3, 6))
    targets = rng.integers(0, 4, size=(3, 6))
    backward(cross_entropy(model_forward(tokens, model), targets))
    dead = [name for name, t in model.parameters().items() if t.grad is None or not np.any(t.grad != 0)]
    assert dead == []


def test_urpe_adds_exactly_the_c_parameters():
    for H, n_max in ((2, 6), (3, 9)):
        rpe = small_model("rpe", H=H, n_max=n_max)
        urpe = small_model("urpe", H=H, n_max=n_max)
        assert urpe.param_count() - rpe.param_count() == urpe_param_count(H, n_max) == H * (2 * n_max - 1)


def test_no_decay_names():
    assert no_decay("urpe.C.h0")
    assert no_decay("B.h1")
    assert no_decay("embedding")
    assert no_decay("blocks.0.shaw.h0")
    assert no_decay("blocks.1.norm_ffn")
    assert not no_decay("blocks.0.attn.h0.W_Q")
    assert not no_decay("head.W")


# twins

def test_twin_shares_weights_and_matches_backbone():
    model = small_model("rpe")
    twin = build_twin(model, urpe=True)
    assert twin.embedding is model.embedding
    assert twin.blocks[1].attn is model.blocks[1].attn
    assert model.urpe is None and twin.urpe is not None
    assert twin.config.variant == "urpe"
    tokens = np.array([[0, 1, 2, 3, 4, 0]])
    assert np.array_equal(model_forward(tokens, model).data, model_forward(tokens, twin).data)


def test_twin_without_c():
    model = small_model("urpe")
    twin = build_twin(model, urpe=False)
    assert twin.urpe is None
    assert all(block.pe.urpe is None for block in twin.blocks)
    assert model.urpe is not None


# config

def test_model_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(L=0)
    with pytest.raises(ConfigError):
        ModelConfig(pe_kind="rotary")
    with pytest.raises(ConfigError):
        ModelConfig(dtype="float16")
    with pytest.raises(ConfigError):
        ModelConfig.for_variant("alibi")
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"L": 1, "depth": 3})


def test_variant_names_round_trip():
    for variant in ("none", "ape", "rpe", "shaw", "urpe", "urpe-shaw"):
        assert ModelConfig.for_variant(variant).variant == variant


# checkpoints

def test_checkpoint_round_trip(tmp_path):
    model = small_model("urpe-shaw", attn_bias=True, use_norm=True)
    model.urpe.per_head[1].set_offset(-2, 0.5)
    path = save_checkpoint(model, str(tmp_path / "ckpt" / "model.bin"), meta={"step": 7})
    loaded = load_checkpoint(path)
    assert loaded.config == model.config
    assert loaded.meta == {"step": 7}
    for name, t in model.parameters().items():
        assert np.array_equal(loaded.parameters()[name].data, t.data)
    tokens = np.array([1, 2, 3])
    assert np.array_equal(model_forward(tokens, loaded).data, model_forward(tokens, model).data)
    assert not (tmp_path / "ckpt" / "model.bin.tmp").exists()


def test_truncated_checkpoint_is_rejected(tmp_path):
    path = save_checkpoint(small_model(), str(tmp_path / "model.bin"))
    blob = open(path, "rb").read()
    with open(path, "wb") as fh:
        fh.write(blob[:-20])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_with_trailing_bytes_is_rejected(tmp_path):
    path = save_checkpoint(small_model(), str(tmp_path / "model.bin"))
    with open(path, "ab") as fh:
        fh.write(b"\x00" * 8)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_non_checkpoint_files_are_rejected(tmp_path):
    bogus = tmp_path / "bogus.bin"
    bogus.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError):
        load_checkpoint(str(bogus))
    with pytest.raises(CheckpointError):
        load_checkpoint(str(tmp_path / "missing.bin"))
