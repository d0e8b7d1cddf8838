import numpy as np
import pytest

from crtlab import oracle
from crtlab.model import (
    MlpModel,
    final_layer_spectral_norm,
    forward_logits,
    load_checkpoint,
    save_checkpoint,
)
from crtlab.errors import CheckpointDimensionError, CheckpointVersionError, CorruptCheckpointError, ShapeError
from crtlab.rng import substream


def linear(W, b=None):
    W = np.asarray(W, dtype=float)
    return MlpModel.from_arrays([W], [np.zeros(W.shape[1]) if b is None else b])


def test_zero_weights_give_zero_logits(rng):
    model = MlpModel.from_arrays([np.zeros((4, 5)), np.zeros((5, 3))], [np.zeros(5), np.zeros(3)])
    np.testing.assert_array_equal(forward_logits(model, rng.uniform(size=(6, 4))).data, 0.0)


def test_identity_layer_returns_input(rng):
    x = rng.uniform(size=(3, 4))
    np.testing.assert_array_equal(forward_logits(linear(np.eye(4)), x).data, x)


def test_logits_match_straight_line_reimplementation():
    model = MlpModel.init([2, 16, 3], substream(5, "init"))
    x = substream(5, "data").uniform(size=(10, 2))
    W0, b0, W1, b1 = (p.data for p in model.parameters())
    expected = np.empty((10, 3))
    for i in range(10):
        hid = [max(0.0, sum(x[i, a] * W0[a, j] for a in range(2)) + b0[j]) for j in range(16)]
        expected[i] = [sum(hid[j] * W1[j, c] for j in range(16)) + b1[c] for c in range(3)]
    np.testing.assert_allclose(forward_logits(model, x).data, expected, atol=1e-13)


def test_representation_is_penultimate_activation(rng):
    model = MlpModel.init([5, 7, 6, 2], rng)
    logits, rep = forward_logits(model, rng.uniform(size=(4, 5)), return_rep=True)
    assert rep.shape == (4, 6) and np.all(rep.data >= 0)
    np.testing.assert_allclose(logits.data, rep.data @ model.weights[-1].data + model.biases[-1].data)


def test_init_bounds_follow_fan_in(rng):
    model = MlpModel.init([144, 64, 64, 4], rng)
    for w, fan_in in zip(model.weights, [144, 64, 64]):
        assert np.abs(w.data).max() <= 1 / np.sqrt(fan_in)


def test_wrong_input_width_raises(small_model):
    with pytest.raises(ShapeError, match="input dim 16"):
        forward_logits(small_model, np.zeros((2, 15)))


@pytest.mark.parametrize("W,expected", [(2 * np.eye(3), 2.0), (np.diag([3.0, 1.0]), 3.0)])
def test_spectral_norm_simple_matrices(W, expected):
    assert final_layer_spectral_norm(linear(W)) == pytest.approx(expected, abs=1e-12)


def test_spectral_norm_matches_dense_oracle(rng):
    for _ in range(20):
        model = MlpModel.from_arrays([rng.normal(size=(3, 8)), rng.normal(size=(8, 5))], [np.zeros(8), np.zeros(5)])
        ours = final_layer_spectral_norm(model)
        assert abs(ours - oracle.spectral_norm_svd(model.final_layer_matrix())) <= 1e-6
        assert abs(ours - np.linalg.svd(model.final_layer_matrix(), compute_uv=False)[0]) <= 1e-6


def test_spectral_norm_of_zero_matrix():
    assert final_layer_spectral_norm(linear(np.zeros((3, 2)))) == 0.0


def test_checkpoint_round_trip_is_bit_exact(tmp_path, rng):
    model = MlpModel.init([144, 64, 64, 4], rng)
    model.weights[0].data[0, 0] = 1 / 3
    model.biases[1].data[2] = -5e-324
    model.metadata.update({"seed": 7, "epoch": 12, "time_step": 1})
    path = tmp_path / "m.txt"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    assert back.layer_dims == model.layer_dims
    assert back.metadata == {"seed": 7, "epoch": 12, "time_step": 1}
    for a, b in zip(model.parameters(), back.parameters()):
        assert a.data.tobytes() == b.data.tobytes()
    save_checkpoint(back, tmp_path / "again.txt")
    assert (tmp_path / "again.txt").read_bytes() == path.read_bytes()


def _saved(tmp_path, rng):
    path = tmp_path / "m.txt"
    save_checkpoint(MlpModel.init([4, 3, 2], rng), path)
    return path


def test_truncated_checkpoint_is_corrupt(tmp_path, rng):
    path = _saved(tmp_path, rng)
    text = path.read_text()
    path.write_text(text[: len(text) // 2])
    with pytest.raises(CorruptCheckpointError, match="truncated"):
        load_checkpoint(path)


def test_future_version_is_rejected(tmp_path, rng):
    path = _saved(tmp_path, rng)
    path.write_text(path.read_text().replace("format_version = 1", "format_version = 999"))
    with pytest.raises(CheckpointVersionError, match="999"):
        load_checkpoint(path)


def test_dimension_mismatch_is_its_own_error(tmp_path, rng):
    path = _saved(tmp_path, rng)
    path.write_text(path.read_text().replace("layer_dims = 4 3 2", "layer_dims = 4 3 3"))
    with pytest.raises(CheckpointDimensionError):
        load_checkpoint(path)


def test_garbage_and_binary_files(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("hello\n")
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(bad)
    bad.write_bytes(b"\xff\xfe\x00")
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(bad)


def test_malformed_number(tmp_path, rng):
    path = _saved(tmp_path, rng)
    lines = path.read_text().split("\n")
    idx = next(i for i, line in enumerate(lines) if line.startswith("[layer 0 weight")) + 1
    lines[idx] = lines[idx].replace(lines[idx].split()[0], "nan?", 1)
    path.write_text("\n".join(lines))
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(path)


def test_frozen_copy_shares_storage(rng):
    model = MlpModel.init([3, 2], rng)
    frozen = model.frozen()
    model.weights[0].data += 1.0
    np.testing.assert_array_equal(frozen.weights[0].data, model.weights[0].data)
    assert not frozen.weights[0].requires_grad
    clone = model.copy()
    model.weights[0].data += 1.0
    assert not np.array_equal(clone.weights[0].data, model.weights[0].data)
