import numpy as np
import pytest

from vip.autodiff import DimensionError, Tensor, backward, sum_all
from vip.fixtures import TOY_CONFIG, uniform_attention_model
from vip.vit import (ConfigError, ViTConfig, WeightFormatError, init_random, load_weights,
                     parameter_shapes, save_weights)


def test_seq_len_small():
    assert ViTConfig(resolution=64, patch_dim=16).seq_len == 17


def test_seq_len_standard():
    cfg = ViTConfig(resolution=224, patch_dim=16, embed_dim=64, num_heads=4)
    assert cfg.seq_len == 197 and cfg.grid_size == 14


@pytest.mark.parametrize("kwargs", [
    dict(embed_dim=66, num_heads=4),
    dict(resolution=60, patch_dim=16),
    dict(num_layers=0),
    dict(std=(1.0, 0.0, 1.0)),
])
def test_invalid_config(kwargs):
    with pytest.raises(ConfigError):
        ViTConfig(**kwargs)


def test_forward_shapes_and_trace_depth(model, image):
    out = model.forward(image, trace_up_to=2)
    assert out.tokens.shape == (17, 64)
    np.testing.assert_array_equal(out.pooled.data, out.tokens.data[0])
    assert out.activations.num_layers == 2
    assert out.activations.value(1, 0).shape == (17, 16)
    with pytest.raises(IndexError):
        out.activations.attention(3, 0)


def test_forward_rejects_wrong_shape(model):
    with pytest.raises(DimensionError):
        model.forward(np.zeros((3, 32, 32), np.float32))


def test_zero_query_key_gives_uniform_attention(image):
    out = uniform_attention_model().forward(image)
    for layer in range(1, TOY_CONFIG.num_layers + 1):
        np.testing.assert_allclose(out.activations.attention_array(layer), 1 / 17, atol=1e-7)


def test_attention_is_scaled_softmax_of_traced_qk(model64, image):
    trace = model64.forward(image).activations
    d = TOY_CONFIG.head_dim
    for layer in (1, 3):
        for head in range(TOY_CONFIG.num_heads):
            q, k = trace.query(layer, head).data, trace.key(layer, head).data
            logits = q @ k.T / np.sqrt(d)
            expected = np.exp(logits - logits.max(axis=1, keepdims=True))
            expected /= expected.sum(axis=1, keepdims=True)
            np.testing.assert_allclose(trace.attention(layer, head).data, expected, rtol=1e-10, atol=1e-13)


def test_attention_rows_are_stochastic(model, image):
    trace = model.forward(image).activations
    for layer in range(1, 5):
        np.testing.assert_allclose(trace.attention_array(layer).sum(axis=-1), 1.0, atol=1e-5)


def test_patch_token_layout(image):
    """Token 1 + r*grid + c sees only patch (r, c) when blocks are inert."""
    model = init_random(TOY_CONFIG, 3)
    weights = dict(model.weights)
    for layer in range(TOY_CONFIG.num_layers):
        weights[f"layer{layer}.wo"] = np.zeros_like(weights[f"layer{layer}.wo"])
        weights[f"layer{layer}.w2"] = np.zeros_like(weights[f"layer{layer}.w2"])
    model = type(model)(TOY_CONFIG, weights)
    base = model.forward(image).tokens.data
    bumped = image.copy()
    bumped[:, 16:32, 32:48] += 40.0  # patch row 1, column 2 -> token 7
    changed = np.abs(model.forward(bumped).tokens.data - base).max(axis=1) > 0
    assert np.flatnonzero(changed).tolist() == [7]


def test_gradient_reaches_pixels(model, image):
    x = Tensor(image, requires_grad=True)
    out = model.forward(x, trace_up_to=1)
    backward(sum_all(out.activations.attention(1, 0)[:, [3]]))
    assert np.abs(x.grad).max() > 0
    assert np.all(np.isfinite(x.grad))


def test_init_is_deterministic():
    assert init_random(TOY_CONFIG, 5).checksum() == init_random(TOY_CONFIG, 5).checksum()
    assert init_random(TOY_CONFIG, 5).checksum() != init_random(TOY_CONFIG, 6).checksum()


def test_parameter_order_is_stable():
    names = [n for n, _ in parameter_shapes(TOY_CONFIG)]
    assert names[:4] == ["patch_w", "patch_b", "cls", "pos"]
    assert names[-2:] == ["lnf_g", "lnf_b"]
    assert len(names) == len(set(names)) == 4 + 16 * 4 + 2


def test_save_load_round_trip(tmp_path, model, image):
    path = tmp_path / "m.vitw"
    save_weights(model, path)
    loaded = load_weights(path)
    assert loaded.config == model.config
    a = model.forward(image).tokens.data
    b = loaded.forward(image).tokens.data
    assert a.tobytes() == b.tobytes()
    save_weights(loaded, tmp_path / "again.vitw")
    assert path.read_bytes() == (tmp_path / "again.vitw").read_bytes()


def _saved(tmp_path, model):
    path = tmp_path / "m.vitw"
    save_weights(model, path)
    return path, bytearray(path.read_bytes())


def test_load_rejects_bad_magic(tmp_path, model):
    path, blob = _saved(tmp_path, model)
    blob[:4] = b"XXXX"
    path.write_bytes(bytes(blob))
    with pytest.raises(WeightFormatError, match="magic"):
        load_weights(path)


def test_load_rejects_bad_version(tmp_path, model):
    path, blob = _saved(tmp_path, model)
    blob[4] = 9
    path.write_bytes(bytes(blob))
    with pytest.raises(WeightFormatError, match="version"):
        load_weights(path)


def test_load_rejects_heads_not_dividing_embed(tmp_path, model):
    path, blob = _saved(tmp_path, model)
    blob[8 + 3 * 4:8 + 4 * 4] = (3).to_bytes(4, "little")  # num_heads = 3, embed 64
    path.write_bytes(bytes(blob))
    with pytest.raises(WeightFormatError, match="config"):
        load_weights(path)


def test_load_rejects_truncation(tmp_path, model):
    path, blob = _saved(tmp_path, model)
    path.write_bytes(bytes(blob[:-10]))
    with pytest.raises(WeightFormatError, match="truncated"):
        load_weights(path)


def test_load_rejects_trailing_bytes(tmp_path, model):
    path, blob = _saved(tmp_path, model)
    path.write_bytes(bytes(blob) + b"\0\0\0\0")
    with pytest.raises(WeightFormatError, match="trailing"):
        load_weights(path)
