import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sitepool.models import ModelSpec, PriorConfig, build_model
from sitepool.transforms import Bounded, CorrCholesky, Identity, Positive, TanhCorr, scale_transform

from .conftest import central_difference

reals = arrays(float, 3, elements=st.floats(-4, 4))


@settings(max_examples=50, deadline=None)
@given(reals)
@pytest.mark.parametrize("t", [Identity(), Positive(), Bounded(-2.0, 5.0), TanhCorr()])
def test_round_trip(t, u):
    assert np.allclose(t.inverse(t.forward(u)), u, rtol=0, atol=1e-10)


@pytest.mark.parametrize("t", [Positive(), Bounded(0.0, 20.0), TanhCorr()])
def test_log_jacobian_matches_fd(t):
    rng = np.random.default_rng(0)
    for _ in range(50):
        u = rng.uniform(-3, 3, 1)
        d = central_difference(lambda v: t.forward(v)[0], u, 1e-4)[0]
        assert t.log_jacobian(u) == pytest.approx(np.log(abs(d)), abs=1e-6)


def test_scale_transform_choice():
    assert isinstance(scale_transform(None), Positive)
    assert isinstance(scale_transform(3.0), Bounded)
    with pytest.raises(ValueError):
        Bounded(1.0, 1.0)
    with pytest.raises(ValueError):
        Positive().inverse(np.array([0.0]))


def test_corr_cholesky_2d_is_tanh():
    cc = CorrCholesky(2)
    u = np.array([0.37])
    L = cc.forward(u)
    assert L[1, 0] == pytest.approx(np.tanh(0.37))
    assert cc.log_jacobian(u) == pytest.approx(TanhCorr().log_jacobian(u))


@pytest.mark.parametrize("dim", [2, 3, 4])
def test_corr_cholesky_round_trip_and_unit_rows(dim):
    cc = CorrCholesky(dim)
    rng = np.random.default_rng(dim)
    for _ in range(20):
        u = rng.normal(size=cc.size)
        L = cc.forward(u)
        assert np.allclose(np.sum(L * L, axis=1), 1.0, atol=1e-12)
        assert np.allclose(cc.inverse(L), u, atol=1e-10)


def test_corr_cholesky_jacobian_3d():
    # log |d vech(Omega) / d u| by finite differences
    cc = CorrCholesky(3)
    rng = np.random.default_rng(9)
    idx = np.tril_indices(3, -1)
    for _ in range(10):
        u = rng.normal(scale=0.7, size=3)

        def offdiag(v):
            L = cc.forward(v)
            return (L @ L.T)[idx]

        J = np.empty((3, 3))
        for j in range(3):
            e = np.zeros(3)
            e[j] = 1e-5
            J[:, j] = (offdiag(u + e) - offdiag(u - e)) / 2e-5
        assert cc.log_jacobian(u) == pytest.approx(np.log(abs(np.linalg.det(J))), abs=1e-6)


def test_model_layout_round_trip(joint_summary_data, small_micro):
    for model in (build_model(ModelSpec("joint_summary", PriorConfig(scale_upper=30.0)), joint_summary_data),
                  build_model(ModelSpec("full_data_joint"), small_micro),
                  build_model(ModelSpec("interactions", covariates=("x1",)), small_micro)):
        rng = np.random.default_rng(1)
        u = rng.uniform(-2, 2, (5, model.dim))
        vals = model.layout.constrain(u)
        assert np.allclose(model.layout.unconstrain(vals), u, atol=1e-10)
        assert model.layout.log_jacobian(u).shape == (5,)
        starts = [b.start for b in model.layout.blocks]
        sizes = [b.size for b in model.layout.blocks]
        assert starts == list(np.cumsum([0] + sizes[:-1]))
        assert sum(sizes) == model.dim
