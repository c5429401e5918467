"""Adam update rule and binary checkpoint roundtrips."""

import numpy as np
import pytest

from cardiofield.autodiff import Tensor
from cardiofield.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from cardiofield.optim import Adam, AdamState, OptimizerError, adam_step

from oracles import scalar_adam


def test_adam_first_step_closed_form():
    st = AdamState.for_shape(())
    p = adam_step(np.array(0.0), np.array(1.0), st, lr=1e-3)
    # frozen closed form: -lr * (1 - 1e-8/(1+1e-8)) ~ -0.0009999999900000002
    assert abs(p - (-1e-3)) < 1e-6
    assert abs(p - (-0.0009999999900000002)) < 1e-15
    assert st.step == 1


def test_adam_zero_gradient_leaves_params_unchanged():
    t = Tensor([1.5, -2.5], requires_grad=True)
    opt = Adam([t], lr=0.1)
    for _ in range(5):
        t.grad = np.zeros(2)
        opt.step()
    assert np.allclose(t.data, [1.5, -2.5])


def test_adam_two_steps_match_scalar_reference():
    st = AdamState.for_shape(())
    p = np.array(0.3)
    for _ in range(2):
        p = adam_step(p, np.array(1.0), st, lr=1e-2)
    ref = scalar_adam(0.3, [1.0, 1.0], lr=1e-2)
    assert abs(float(p) - ref) < 1e-10


def test_adam_longer_trajectory_matches_scalar_reference():
    rng = np.random.default_rng(0)
    grads = rng.normal(size=20).tolist()
    st = AdamState.for_shape(())
    p = np.array(-0.7)
    for g in grads:
        p = adam_step(p, np.array(g), st, lr=3e-3)
    assert abs(float(p) - scalar_adam(-0.7, grads, lr=3e-3)) < 1e-10


def test_adam_rejects_nan_gradient_with_name():
    t = Tensor([1.0], requires_grad=True, name="probe.rot")
    opt = Adam([t], lr=0.1)
    t.grad = np.array([np.nan])
    with pytest.raises(OptimizerError, match="probe.rot"):
        opt.step()


def test_adam_rejects_bad_lr_and_shapes():
    st = AdamState.for_shape((2,))
    with pytest.raises(OptimizerError):
        adam_step(np.zeros(2), np.zeros(2), st, lr=0.0)
    with pytest.raises(OptimizerError):
        adam_step(np.zeros(3), np.zeros(3), st, lr=0.1)


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    tensors = {
        "mlp.0.weight": rng.normal(size=(4, 3)),
        "mlp.0.bias": rng.normal(size=(3,)),
        "codes": rng.normal(size=(5, 8)),
        "scalar": np.array(2.5),
    }
    meta = {"latent_dim": 8, "note": "fixture"}
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, tensors, meta)
    loaded, got_meta = load_checkpoint(path)
    assert got_meta == meta
    assert set(loaded) == set(tensors)
    for k in tensors:
        assert np.array_equal(loaded[k], tensors[k])


def test_checkpoint_deterministic_bytes(tmp_path):
    tensors = {"b": np.arange(6.0).reshape(2, 3), "a": np.ones(4)}
    p1, p2 = tmp_path / "one.ckpt", tmp_path / "two.ckpt"
    save_checkpoint(p1, tensors, {"v": 1})
    save_checkpoint(p2, dict(reversed(list(tensors.items()))), {"v": 1})
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"XXXX" + b"\x00" * 16)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)
