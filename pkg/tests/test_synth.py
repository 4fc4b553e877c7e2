import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from synthreg.grid import Volume, sample_trilinear
from synthreg.synth import (
    SynthesisError,
    SynthesisModel,
    pretrain_histogram_match,
    synth_param_jacobian,
    synth_vjp,
    synthesize,
)


def squared_transfer(k):
    t = (np.arange(k) / (k - 1)) ** 2
    return np.sqrt(np.diff(np.concatenate([[0.0], t])))


def random_model(rng, k=8, grid=(3, 4, 2), out_range=(-1.0, 2.0)):
    return SynthesisModel(rng.standard_normal(k), 0.3 * rng.standard_normal(grid), out_range)


def synth_oracle(model, data):
    """Per-voxel re-implementation: normalize, piecewise-linear transfer, trilinear gain."""
    k = model.n_knots
    c = np.cumsum(model.transfer_raw ** 2)
    knots = c / c[-1]
    lo_v, hi_v = data.min(), data.max()
    gains = Volume(np.exp(model.gain_raw))
    lo, hi = model.out_range
    out = np.empty_like(data)
    for idx in np.ndindex(data.shape):
        q = (data[idx] - lo_v) / (hi_v - lo_v)
        s = q * (k - 1)
        i = min(int(np.floor(s)), k - 2)
        t = knots[i] + (s - i) * (knots[i + 1] - knots[i])
        x = [(idx[a] + 0.5) * model.grid_dims[a] / data.shape[a] - 0.5 for a in range(3)]
        out[idx] = lo + (hi - lo) * sample_trilinear(gains, x) * t
    return out


def test_identity_model():
    m = SynthesisModel.identity(16, (4, 4, 4))
    q = np.linspace(0, 1, 101)
    np.testing.assert_allclose(m.transfer(q), q, atol=1e-15)
    np.testing.assert_allclose(m.gain((5, 6, 7)), 1.0, atol=1e-15)


def test_model_validation():
    with pytest.raises(SynthesisError):
        SynthesisModel(np.zeros(1), np.zeros((2, 2, 2)))
    with pytest.raises(SynthesisError):
        SynthesisModel(np.zeros(4), np.zeros((2, 2)))
    with pytest.raises(SynthesisError):
        SynthesisModel(np.array([0.0, np.nan]), np.zeros((2, 2, 2)))
    m = SynthesisModel.identity(4, (2, 2, 2))
    with pytest.raises(SynthesisError):
        m.with_params(np.zeros(3))


def test_serialization_round_trip():
    rng = np.random.default_rng(0)
    m = random_model(rng)
    blob = m.to_bytes()
    assert blob[:4] == b"XSYN"
    back = SynthesisModel.from_bytes(blob)
    assert np.array_equal(back.params, m.params) and back.out_range == m.out_range
    assert back.to_bytes() == blob
    with pytest.raises(SynthesisError):
        SynthesisModel.from_bytes(blob[:-8])
    with pytest.raises(SynthesisError):
        SynthesisModel.from_bytes(b"XXXX" + blob[4:])


def test_synthesize_identity_is_rescaled_input():
    rng = np.random.default_rng(1)
    v = Volume(rng.uniform(3.0, 9.0, size=(6, 6, 6)))
    m = SynthesisModel.identity(16, (4, 4, 4), (10.0, 20.0))
    q = (v.data - v.data.min()) / (v.data.max() - v.data.min())
    np.testing.assert_allclose(synthesize(m, v).data, 10.0 + 10.0 * q, atol=1e-12)


def test_synthesize_squared_transfer():
    k = 11
    m = SynthesisModel(squared_transfer(k), np.zeros((2, 2, 2)))
    # every voxel at a knot, plus the extremes that fix the normalization
    q = np.arange(k) / (k - 1)
    data = np.resize(q, (4, 4, 4))
    data[0, 0, 0], data[0, 0, 1] = 0.0, 1.0
    out = synthesize(m, Volume(data)).data
    assert np.max(np.abs(out - data ** 2)) < 1e-12
    # between knots the transfer is the chord of q^2
    qq = np.array([0.05, 0.33, 0.71])
    lo = np.floor(qq * (k - 1)) / (k - 1)
    hi = lo + 1.0 / (k - 1)
    chord = lo ** 2 + (qq - lo) * (hi ** 2 - lo ** 2) * (k - 1)
    assert np.max(np.abs(m.transfer(qq) - chord)) < 1e-12


def test_synthesize_matches_oracle():
    rng = np.random.default_rng(2)
    m = random_model(rng)
    data = rng.random((7, 5, 6))
    assert np.max(np.abs(synthesize(m, Volume(data)).data - synth_oracle(m, data))) < 1e-12


def test_synthesize_constant_input_is_finite():
    m = SynthesisModel.identity()
    out = synthesize(m, Volume(np.full((4, 4, 4), 3.0)))
    assert np.all(np.isfinite(out.data))


def test_pretrain_same_distribution_gives_identity():
    rng = np.random.default_rng(3)
    moving = Volume(rng.beta(2, 5, size=(16, 16, 16)))
    fixed = Volume(rng.beta(2, 5, size=(16, 16, 16)))
    m = pretrain_histogram_match(SynthesisModel.identity(16), moving, fixed)
    mv = np.sort(moving.data.ravel())
    qs = (np.quantile(mv, np.linspace(0, 1, 41)) - mv[0]) / (mv[-1] - mv[0])
    ff = fixed.data
    fq = (np.quantile(ff, np.linspace(0, 1, 41)) - ff.min()) / (ff.max() - ff.min())
    assert np.max(np.abs(m.transfer(qs) - fq)) < 0.05
    assert np.max(np.abs(m.transfer(qs) - qs)) < 0.05


def quantile_pair_oracle(moving, fixed, k):
    """Knot s -> fixed quantile at the moving CDF value F_m(s), then running max."""
    qm = (moving - moving.min()) / (moving.max() - moving.min())
    qf = (fixed - fixed.min()) / (fixed.max() - fixed.min())
    s = np.arange(k) / (k - 1)
    out = []
    for sk in s:
        p = np.count_nonzero(qm <= sk) / qm.size
        srt = np.sort(qf.ravel())
        out.append(srt[max(int(np.ceil(p * srt.size)) - 1, 0)])
    return np.maximum.accumulate(out)


def test_pretrain_inverted_contrast_is_monotone_projection():
    rng = np.random.default_rng(4)
    moving = rng.beta(2, 5, size=(16, 16, 16))
    fixed = 1.0 - moving
    m = pretrain_histogram_match(SynthesisModel.identity(16), Volume(moving), Volume(fixed))
    np.testing.assert_allclose(m.knots(), quantile_pair_oracle(moving, fixed, 16), atol=1e-12)
    assert np.all(np.diff(m.knots()) >= 0)
    # the decreasing map 1 - q is not representable; the fit preserves intensity rank
    q = np.linspace(0, 1, 50)
    assert np.max(np.abs(m.transfer(q) - (1 - q))) > 0.5


def test_pretrain_two_levels():
    rng = np.random.default_rng(5)
    mov = np.where(rng.random((8, 8, 8)) < 0.5, 2.0, 5.0)
    fix = np.full(512, 10.0)
    fix[: int(np.count_nonzero(mov == 2.0))] = 30.0
    fix = rng.permutation(fix).reshape(8, 8, 8)
    # match the masses in the same order: low moving -> low fixed
    fix = np.where(fix == 30.0, 10.0, 30.0)
    m = pretrain_histogram_match(SynthesisModel.identity(16), Volume(mov), Volume(fix))
    out = synthesize(m, Volume(mov)).data
    assert np.array_equal(out[mov == 2.0], np.full(np.count_nonzero(mov == 2.0), 10.0))
    assert np.array_equal(out[mov == 5.0], np.full(np.count_nonzero(mov == 5.0), 30.0))


def test_pretrain_idempotent():
    rng = np.random.default_rng(6)
    moving = Volume(rng.gamma(2.0, size=(16, 16, 16)))
    fixed = Volume(np.sqrt(rng.random((16, 16, 16))))
    first = pretrain_histogram_match(SynthesisModel.identity(16), moving, fixed)
    synth = synthesize(first, moving)
    again = pretrain_histogram_match(SynthesisModel.identity(16), synth, fixed)
    q = np.linspace(0, 1, 101)
    assert np.max(np.abs(again.transfer(q) - q)) < 0.05


def test_pretrain_rejects_constant():
    with pytest.raises(SynthesisError):
        pretrain_histogram_match(SynthesisModel.identity(), Volume(np.ones((4, 4, 4))),
                                 Volume(np.random.default_rng(0).random((4, 4, 4))))


def test_jacobian_gain_locality():
    rng = np.random.default_rng(7)
    m = random_model(rng, grid=(4, 4, 4))
    v = Volume(rng.random((16, 16, 16)))
    j = synth_param_jacobian(m, v, [0])  # voxel (0, 0, 0) sits in gain cell (0, 0, 0)
    gains = j[0, m.n_knots:].reshape(4, 4, 4)
    assert gains[0, 0, 0] != 0.0
    assert np.all(gains[2:, :, :] == 0.0) and np.all(gains[:, 2:, :] == 0.0)


def fd_jacobian(model, v, voxels, h):
    p = model.params
    cols = []
    for i in range(p.size):
        q1, q2 = p.copy(), p.copy()
        q1[i] += h
        q2[i] -= h
        d = (synthesize(model.with_params(q1), v).data.ravel()[voxels]
             - synthesize(model.with_params(q2), v).data.ravel()[voxels]) / (2 * h)
        cols.append(d)
    return np.stack(cols, axis=1)


def test_jacobian_single_knot():
    rng = np.random.default_rng(8)
    m = random_model(rng)
    v = Volume(rng.random((8, 8, 8)))
    voxels = np.arange(0, 512, 7)
    j = synth_param_jacobian(m, v, voxels)
    h = 1e-6
    for i in (2, 5):
        p1, p2 = m.params.copy(), m.params.copy()
        p1[i] += h
        p2[i] -= h
        fd = (synthesize(m.with_params(p1), v).data.ravel()[voxels]
              - synthesize(m.with_params(p2), v).data.ravel()[voxels]) / (2 * h)
        assert np.linalg.norm(fd - j[:, i]) / np.linalg.norm(fd) < 1e-6


def test_jacobian_all_parameters():
    rng = np.random.default_rng(9)
    m = random_model(rng, k=16, grid=(4, 4, 4))
    v = Volume(rng.random((8, 8, 8)))
    voxels = np.arange(512)
    j = synth_param_jacobian(m, v)
    fd = fd_jacobian(m, v, voxels, 1e-6)
    assert np.linalg.norm(fd - j) / np.linalg.norm(fd) < 1e-5


def test_vjp_is_jacobian_transpose():
    rng = np.random.default_rng(10)
    m = random_model(rng)
    v = Volume(rng.random((6, 7, 5)))
    w = rng.standard_normal(v.dims)
    np.testing.assert_allclose(synth_vjp(m, v, w), synth_param_jacobian(m, v).T @ w.ravel(),
                               rtol=1e-10, atol=1e-12)


raw_params = arrays(np.float64, st.integers(2, 20),
                    elements=st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False))


@settings(max_examples=60, deadline=None)
@given(raw_params, st.lists(st.floats(0, 1), min_size=2, max_size=30))
def test_property_transfer_monotone(raw, qs):
    m = SynthesisModel(raw, np.zeros((2, 2, 2)))
    q = np.sort(np.asarray(qs))
    t = m.transfer(q)
    assert np.all(np.diff(t) >= 0)
    assert np.all(np.isfinite(t))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 3, 2), elements=st.floats(-30, 30)), st.integers(0, 2 ** 31))
def test_property_gain_positive_and_output_finite(gain_raw, seed):
    m = SynthesisModel(np.ones(5), gain_raw)
    assert np.all(m.gain((5, 4, 6)) > 0)
    v = Volume(np.random.default_rng(seed).standard_normal((5, 4, 6)))
    out = synthesize(m, v)
    assert out.dims == v.dims and out.spacing == v.spacing
    assert np.all(np.isfinite(out.data))
