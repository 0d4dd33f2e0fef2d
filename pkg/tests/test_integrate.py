import numpy as np
import pytest

from recast import tensor as T
from recast.core import RecastConfig, RecastModel
from recast.exceptions import ShapeError, UndefinedMetricError
from recast.integrate import (AdapterSpec, combine_dora, combine_lora, combine_mask, combine_rosa, merge,
                              rescale_to_norm)
from recast.tensor import Tensor

from conftest import finite_diff, rel_err


def fixture(seed, d_out=5, d_in=4, r=2):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(d_out, d_in)), rng.normal(size=(d_out, r)), rng.normal(size=(r, d_in)), rng


# -- identities -------------------------------------------------------------------
@pytest.mark.parametrize("seed", range(10))
def test_identity_elements_are_bit_exact(seed):
    W, B, A, rng = fixture(seed)
    Z = np.zeros_like(B)
    assert np.array_equal(combine_lora(W, Z, A).data, W)
    assert np.array_equal(combine_mask(W, np.ones_like(W)).data, W)
    assert np.array_equal(combine_dora(W, Z, A).data, W)
    assert np.array_equal(combine_dora(W, Z, A, column_wise=True).data, W)
    assert np.array_equal(combine_rosa(W, np.zeros_like(W), Z, A).data, W)


def test_worked_values():
    out = combine_lora(np.eye(2), [[1.0], [0.0]], [[0.0, 1.0]]).data
    np.testing.assert_array_equal(out, [[1, 1], [0, 1]])
    W = np.arange(1.0, 7.0).reshape(2, 3)
    assert not np.any(combine_mask(W, np.zeros_like(W)).data)
    np.testing.assert_array_equal(combine_rosa(W, np.ones_like(W), np.zeros((2, 1)), np.ones((1, 3))).data, 2 * W)


@pytest.mark.parametrize("seed", range(10))
def test_mask_support_law(seed):
    W, _, _, rng = fixture(seed)
    W[rng.random(W.shape) < 0.3] = 0.0
    M = (rng.random(W.shape) < 0.5).astype(float)
    out = combine_mask(W, M).data
    np.testing.assert_array_equal(out != 0, (W != 0) & (M == 1))


@pytest.mark.parametrize("seed", range(10))
def test_rosa_matches_elementwise_oracle(seed):
    W, B, A, rng = fixture(seed)
    S = (rng.random(W.shape) < 0.2).astype(float)
    out = combine_rosa(W, S, B, A).data
    ref = np.empty_like(W)
    for i in range(W.shape[0]):
        for j in range(W.shape[1]):
            ref[i, j] = W[i, j] + S[i, j] * W[i, j] + sum(B[i, k] * A[k, j] for k in range(B.shape[1]))
    assert np.max(np.abs(out - ref)) < 1e-12


# -- DoRA -------------------------------------------------------------------------
@pytest.mark.parametrize("seed", range(20))
def test_dora_preserves_norm(seed):
    W, B, A, _ = fixture(seed)
    for t in (0.1, 1.0, 10.0):
        out = combine_dora(W, t * B, A).data
        assert abs(np.linalg.norm(out) - np.linalg.norm(W)) < 1e-10
    cols = combine_dora(W, B, A, column_wise=True).data
    np.testing.assert_allclose(np.linalg.norm(cols, axis=0), np.linalg.norm(W, axis=0), atol=1e-10)


def test_dora_scaling_changes_direction_only():
    W, B, A, _ = fixture(0)
    outs = [combine_dora(W, t * B, A).data for t in (0.1, 1.0, 10.0)]
    norms = [np.linalg.norm(o) for o in outs]
    assert max(norms) - min(norms) < 1e-10
    assert not np.allclose(outs[0], outs[2])


def test_dora_zero_direction():
    W = np.eye(2)
    with pytest.raises(UndefinedMetricError):
        combine_dora(W, -np.eye(2), np.eye(2))


# -- gradients --------------------------------------------------------------------------
@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("kind", ["lora", "dora", "dora-col", "rosa"])
def test_adapter_gradients_through_generated_weight(seed, kind):
    """Loss gradients w.r.t. adapter factors and coefficients match central differences."""
    cfg = RecastConfig.uniform_fc(1, 4, 1, 2, 2, activation="identity")
    model = RecastModel.initialize(cfg, seed)
    rng = np.random.default_rng(seed + 100)
    B = Tensor(rng.normal(size=(4, 2)) * 0.5, requires_grad=True)
    A = Tensor(rng.normal(size=(2, 4)) * 0.5, requires_grad=True)
    S = (rng.random((4, 4)) < 0.3).astype(float)
    x, y = rng.uniform(-1, 1, (6, 4)), rng.integers(0, 4, 6)
    C = model.coefficients[(0, 0)].values

    def combined():
        W = model.weight(0, 0)
        if kind == "lora":
            return combine_lora(W, B, A)
        if kind == "rosa":
            return combine_rosa(W, S, B, A)
        return combine_dora(W, B, A, column_wise=kind == "dora-col")

    def loss():
        return T.softmax_cross_entropy(T.matmul(Tensor(x), T.transpose(combined())), y)

    loss().backward()
    for p in (B, A, C):
        assert rel_err(p.grad, finite_diff(lambda: loss().item(), p.data)) < 1e-5


@pytest.mark.parametrize("seed", range(10))
def test_rescale_gradient(seed):
    rng = np.random.default_rng(seed)
    D, W, g = rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    for axis in (None, 0):
        tD, tW = Tensor(D, requires_grad=True), Tensor(W, requires_grad=True)
        T.tsum(T.mul(rescale_to_norm(tD, tW, axis), Tensor(g))).backward()
        f = lambda: float(np.sum(rescale_to_norm(D, W, axis).data * g))
        assert rel_err(tD.grad, finite_diff(f, D)) < 1e-6
        assert rel_err(tW.grad, finite_diff(f, W)) < 1e-6


# -- merge and purity ------------------------------------------------------------------------
@pytest.mark.parametrize("seed", range(10))
def test_merged_dense_matches_composed_forward(seed):
    W, B, A, rng = fixture(seed)
    x = rng.normal(size=(7, W.shape[1]))
    S = (rng.random(W.shape) < 0.2).astype(float)
    composed = {
        "lora": x @ W.T + (x @ A.T) @ B.T,
        "rosa": x @ W.T + x @ (S * W).T + (x @ A.T) @ B.T,
        "dora": (x @ W.T + (x @ A.T) @ B.T) * (np.linalg.norm(W) / np.linalg.norm(W + B @ A)),
    }
    merged = {"lora": merge(combine_lora(W, B, A)), "rosa": merge(combine_rosa(W, S, B, A)),
              "dora": merge(combine_dora(W, B, A))}
    for k in composed:
        assert isinstance(merged[k], np.ndarray)
        assert np.max(np.abs(x @ merged[k].T - composed[k])) < 1e-12


def test_combinators_are_pure():
    W, B, A, rng = fixture(3)
    S = (rng.random(W.shape) < 0.5).astype(float)
    for f in (lambda: combine_lora(W, B, A), lambda: combine_dora(W, B, A), lambda: combine_rosa(W, S, B, A)):
        assert np.array_equal(f().data, f().data)


def test_validation_errors():
    W, B, A, _ = fixture(0)
    with pytest.raises(ShapeError):
        combine_lora(W, B.T, A)
    with pytest.raises(ValueError):
        combine_mask(W, np.full(W.shape, 0.5))
    with pytest.raises(ValueError):
        combine_rosa(W, np.full(W.shape, 2.0), B, A)
    with pytest.raises(ShapeError):
        combine_mask(W, np.ones((2, 2)))


# -- AdapterSpec -----------------------------------------------------------------------------
@pytest.mark.parametrize("kind", ["lora", "mask", "dora"])
def test_adapter_spec_initialises_to_identity(kind):
    W = np.random.default_rng(0).normal(size=(6, 5))
    spec = AdapterSpec(kind, rank=2)
    assert np.array_equal(spec.apply(W, spec.init_params(W.shape, seed=1)).data, W)


def test_rosa_spec_mask_sparsity():
    spec = AdapterSpec("rosa", rank=1, sparsity=0.25)
    params = spec.init_params((8, 8), seed=0)
    assert params["S"].data.sum() == 16
    assert spec.n_params((8, 8)) == 16
    assert AdapterSpec("mask").n_params((3, 4)) == 12


@pytest.mark.parametrize("kw", [dict(kind="prefix"), dict(kind="lora", rank=0), dict(kind="rosa", sparsity=1.5)])
def test_adapter_spec_validation(kw):
    with pytest.raises(ValueError):
        AdapterSpec(**kw)
