import copy

import numpy as np
import pytest

from tribind.data import TriModalBatch
from tribind.errors import SchemaVersionMismatchError, ShapeMismatchError, ZeroRowError
from tribind.losses import LossConfig, PairSubset, total_loss
from tribind.model import (
    Model,
    ModelConfig,
    backward_batch,
    build_vocab,
    encode,
    encode_payloads,
    encode_texts,
    forward_batch,
    init_model,
    load_model,
    param_spec,
    project,
    save_model,
    tokenize,
    vocab_index,
)
from tribind.numerics import finite_diff_gradient, relative_error


def tiny_config(vocab):
    return ModelConfig(
        image_shape=(3, 3),
        sequence_shape=(4, 2),
        hidden_dim=6,
        feature_dim=5,
        embed_dim=4,
        token_dim=5,
        vocab=vocab,
    )


def make_batch(rng, cfg):
    texts = ["alpha beta", "alpha beta", "gamma delta"]
    return TriModalBatch(
        indices=[0, 1, 2],
        texts=texts,
        group_ids=[0, 0, 1],
        image_payloads=rng.normal(size=(2, *cfg.image_shape)),
        image_rows=[0, 2],
        sequence_payloads=rng.normal(size=(2, *cfg.sequence_shape)),
        sequence_rows=[1, 2],
        pairs=PairSubset(((1, 1),), batch_size=3),
    )


@pytest.fixture
def model():
    return init_model(tiny_config(build_vocab(["alpha beta", "gamma delta"])), seed=123)


def test_tokenize_oov_and_lookup():
    vidx = {"alpha": 0, "beta": 1}
    assert tokenize("alpha beta", vidx) == [1, 2]
    assert tokenize("ALPHA unseen", vidx) == [1, 0]
    assert tokenize("", vidx) == [0]


def test_encode_zero_payload_zero_params():
    cfg = tiny_config([])
    m = Model(config=cfg, params={name: np.zeros(shape) for name, shape, _ in param_spec(cfg)})
    out = encode(m, "image", np.zeros(cfg.image_shape))
    np.testing.assert_array_equal(out, np.zeros(cfg.feature_dim))


def test_encode_deterministic(model):
    payload = np.ones(model.config.image_shape)
    np.testing.assert_array_equal(
        encode(model, "image", payload), encode(model, "image", payload)
    )


def test_encode_repeated_token_pools_identically(model):
    vidx = vocab_index(model.config)
    table = model.params["text.table"]
    ids_a = tokenize("alpha alpha", vidx)
    ids_b = tokenize("alpha", vidx)
    np.testing.assert_allclose(table[ids_a].mean(axis=0), table[ids_b].mean(axis=0))
    np.testing.assert_allclose(
        encode(model, "text", "alpha alpha"), encode(model, "text", "alpha"), atol=1e-15
    )


def test_encode_shape_mismatch(model):
    with pytest.raises(ShapeMismatchError):
        encode(model, "image", np.zeros((2, 2)))


def test_project_unit_norm_and_345():
    out = project(np.array([3.0, 4.0]), np.eye(2))
    np.testing.assert_allclose(out, [0.6, 0.8], atol=1e-12)
    rng = np.random.default_rng(1)
    w = rng.normal(size=(5, 4))
    r = rng.normal(size=(7, 5))
    z = project(r, w)
    np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-9)


def test_project_scale_invariance():
    rng = np.random.default_rng(2)
    w = rng.normal(size=(5, 4))
    r = rng.normal(size=5)
    np.testing.assert_allclose(project(r, w), project(3.0 * r, w), atol=1e-12)


def test_project_zero_raises():
    with pytest.raises(ZeroRowError):
        project(np.zeros(3), np.eye(3))


def test_forward_batch_unit_rows_and_purity(model):
    rng = np.random.default_rng(3)
    batch = make_batch(rng, model.config)
    f1 = forward_batch(model, batch)
    f2 = forward_batch(model, batch)
    for z in (f1.embeddings.text, f1.embeddings.image, f1.embeddings.sequence):
        np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-9)
    assert np.array_equal(f1.embeddings.text, f2.embeddings.text)
    assert np.array_equal(f1.embeddings.image, f2.embeddings.image)


def test_forward_batch_of_one_matches_single_sample(model):
    payload = np.random.default_rng(4).normal(size=model.config.image_shape)
    batch = TriModalBatch(
        indices=[0],
        texts=["alpha beta"],
        group_ids=[0],
        image_payloads=payload[None],
        image_rows=[0],
        sequence_payloads=None,
        sequence_rows=[],
        pairs=PairSubset((), batch_size=1),
    )
    fwd = forward_batch(model, batch)
    raw = encode(model, "image", payload)
    single = project(raw, model.params["image.proj"])
    np.testing.assert_allclose(fwd.embeddings.image[0], single, atol=1e-12)
    np.testing.assert_allclose(
        fwd.embeddings.text[0],
        project(encode(model, "text", "alpha beta"), model.params["text.proj"]),
        atol=1e-12,
    )


def test_encode_helpers_match_forward(model):
    rng = np.random.default_rng(5)
    batch = make_batch(rng, model.config)
    fwd = forward_batch(model, batch)
    np.testing.assert_allclose(
        encode_texts(model, batch.texts), fwd.embeddings.text, atol=1e-15
    )
    np.testing.assert_allclose(
        encode_payloads(model, "image", batch.image_payloads),
        fwd.embeddings.image,
        atol=1e-15,
    )


def test_parameter_gradients_match_finite_differences(model):
    rng = np.random.default_rng(6)
    batch = make_batch(rng, model.config)
    cfg = LossConfig(tau=0.07, emcl_enabled=True)

    fwd = forward_batch(model, batch)
    res = total_loss(fwd.embeddings, batch.group_ids, batch.pairs, cfg)
    analytic = backward_batch(model, fwd, res.grads)

    def loss_with(name, flat):
        probe = Model(config=model.config, params=dict(model.params))
        probe.params[name] = flat.reshape(model.params[name].shape)
        f = forward_batch(probe, batch)
        return total_loss(f.embeddings, batch.group_ids, batch.pairs, cfg).value

    worst = 0.0
    for name, arr in model.params.items():
        fd = finite_diff_gradient(lambda v, n=name: loss_with(n, v), arr.ravel())
        worst = max(worst, relative_error(analytic[name].ravel(), fd))
    assert worst < 1e-4


def test_backward_zero_for_absent_modality(model):
    batch = TriModalBatch(
        indices=[0, 1],
        texts=["alpha beta", "gamma delta"],
        group_ids=[0, 1],
        image_payloads=None,
        image_rows=[],
        sequence_payloads=np.random.default_rng(7).normal(size=(2, *model.config.sequence_shape)),
        sequence_rows=[0, 1],
        pairs=PairSubset((), batch_size=2),
    )
    fwd = forward_batch(model, batch)
    res = total_loss(fwd.embeddings, batch.group_ids, batch.pairs, LossConfig())
    grads = backward_batch(model, fwd, res.grads)
    assert not grads["image.w1"].any()
    assert grads["sequence.w1"].any()
    assert grads["text.table"].any()


def test_checkpoint_roundtrip(tmp_path, model):
    path = str(tmp_path / "ckpt.json")
    save_model(model, path)
    loaded = load_model(path)
    assert loaded.config == model.config
    for name, arr in model.params.items():
        assert np.array_equal(loaded.params[name], arr)


def test_checkpoint_bad_header(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"schema": "other", "version": 9, "params": {}}')
    with pytest.raises(SchemaVersionMismatchError):
        load_model(str(path))


def test_init_model_seeded_and_bounded():
    cfg = tiny_config(["a", "b"])
    m1 = init_model(cfg, seed=9)
    m2 = init_model(cfg, seed=9)
    m3 = init_model(cfg, seed=10)
    for name, arr in m1.params.items():
        assert np.array_equal(arr, m2.params[name])
    assert any(not np.array_equal(m1.params[k], m3.params[k]) for k in m1.params)
    for name, shape, fan_in in param_spec(cfg):
        assert np.max(np.abs(m1.params[name])) <= 1.0 / np.sqrt(fan_in)


def test_deep_copy_isolation(model):
    clone = copy.deepcopy(model)
    clone.params["image.w1"][0, 0] += 1.0
    assert model.params["image.w1"][0, 0] != clone.params["image.w1"][0, 0]
