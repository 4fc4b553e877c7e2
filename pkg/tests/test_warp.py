import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from synthreg.grid import Volume, sample_trilinear
from synthreg.warp import (
    DisplacementField,
    jacobian_determinant,
    upsample_field,
    warp_adjoint,
    warp_labels_nearest,
    warp_volume,
)


def constant_field(dims, vec):
    return DisplacementField(np.broadcast_to(np.asarray(vec, float)[:, None, None, None],
                                             (3,) + dims))


def test_field_validation():
    with pytest.raises(ValueError):
        DisplacementField(np.zeros((2, 4, 4, 4)))
    with pytest.raises(ValueError):
        DisplacementField(np.full((3, 2, 2, 2), np.inf))
    assert DisplacementField.zeros((3, 4, 5)).dims == (3, 4, 5)


def test_warp_zero_field_is_identity():
    rng = np.random.default_rng(0)
    v = Volume(rng.random((6, 7, 8)))
    out = warp_volume(v, DisplacementField.zeros(v.dims))
    assert np.max(np.abs(out.data - v.data)) <= 1e-12


def test_warp_translates_ramp():
    v = Volume(np.indices((8, 8, 8))[0].astype(float))
    out = warp_volume(v, constant_field(v.dims, (1, 0, 0)))
    assert np.array_equal(out.data[:-1], v.data[:-1] + 1.0)


def test_warp_matches_voxelwise_oracle():
    rng = np.random.default_rng(1)
    v = Volume(rng.random((8, 8, 8)))
    u = DisplacementField(rng.uniform(-1.5, 1.5, size=(3, 8, 8, 8)))
    out = warp_volume(v, u)
    for idx in np.ndindex(v.dims):
        x = np.array(idx) + u.data[(slice(None),) + idx]
        assert out.data[idx] == sample_trilinear(v, x)


def test_warp_rejects_mismatched_dims():
    with pytest.raises(ValueError):
        warp_volume(Volume(np.zeros((4, 4, 4))), DisplacementField.zeros((4, 4, 5)))


@pytest.mark.parametrize("boundary", ["clamp", "zero"])
def test_warp_adjoint_is_transpose(boundary):
    rng = np.random.default_rng(2)
    v = Volume(rng.random((5, 6, 7)))
    u = DisplacementField(rng.uniform(-2, 2, size=(3, 5, 6, 7)))
    g = rng.random(v.dims)
    lhs = np.sum(warp_volume(v, u, boundary).data * g)
    rhs = np.sum(v.data * warp_adjoint(g, u, boundary))
    assert abs(lhs - rhs) < 1e-11


def test_labels_zero_field():
    rng = np.random.default_rng(3)
    lab = Volume(rng.integers(0, 5, size=(6, 6, 6)))
    assert np.array_equal(warp_labels_nearest(lab, DisplacementField.zeros(lab.dims)).data, lab.data)


def test_labels_integer_shift():
    rng = np.random.default_rng(4)
    lab = Volume(rng.integers(0, 5, size=(6, 8, 6)))
    out = warp_labels_nearest(lab, constant_field(lab.dims, (0, 2, 0)))
    assert np.array_equal(out.data[:, :-2], lab.data[:, 2:])


def test_labels_match_round_then_lookup_oracle():
    rng = np.random.default_rng(5)
    lab = Volume(rng.integers(0, 5, size=(7, 7, 7)))
    u = DisplacementField(rng.uniform(-3, 3, size=(3, 7, 7, 7)))
    out = warp_labels_nearest(lab, u)
    for idx in np.ndindex(lab.dims):
        x = np.array(idx) + u.data[(slice(None),) + idx]
        src = tuple(int(min(max(np.floor(c + 0.5), 0), 6)) for c in x)
        assert out.data[idx] == lab.data[src]


def test_labels_reject_non_integer():
    with pytest.raises(ValueError):
        warp_labels_nearest(Volume(np.full((3, 3, 3), 0.5)), DisplacementField.zeros((3, 3, 3)))


def test_upsample_zero_and_constant():
    z = upsample_field(DisplacementField.zeros((4, 4, 4)), (8, 8, 8))
    assert z.dims == (8, 8, 8) and not z.data.any()
    c = upsample_field(constant_field((4, 4, 4), (1, 1, 1)), (8, 8, 8))
    assert np.array_equal(c.data, np.full((3, 8, 8, 8), 2.0))


def test_upsample_spacing_halves():
    u = DisplacementField.zeros((4, 4, 4), (2.0, 2.0, 2.0))
    assert upsample_field(u, (8, 8, 8)).spacing == (1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        upsample_field(u, (2, 8, 8))


def test_upsample_linear_field():
    a = 0.3
    coarse = np.zeros((3, 8, 8, 8))
    coarse[0] = a * np.indices((8, 8, 8))[0]
    fine = upsample_field(DisplacementField(coarse), (16, 16, 16))
    # fine voxel x sits at coarse coordinate (x + 0.5) / 2 - 0.5
    x = np.arange(16)
    c = (x + 0.5) / 2 - 0.5
    inside = (c >= 0) & (c <= 7)
    expected = 2.0 * a * c
    got = fine.data[0][:, 5, 5]
    assert np.max(np.abs(got[inside] - expected[inside])) < 1e-9
    assert not fine.data[1:].any()
    # in fine voxels the field is still linear: constant first differences
    np.testing.assert_allclose(np.diff(got[inside]), a, atol=1e-12)


def test_jacobian_cases():
    dims = (6, 6, 6)
    assert np.all(jacobian_determinant(DisplacementField.zeros(dims)).data == 1.0)
    assert np.all(jacobian_determinant(constant_field(dims, (0.4, -1.0, 2.0))).data == 1.0)
    u = np.zeros((3,) + dims)
    u[0] = 0.1 * np.indices(dims)[0]
    det = jacobian_determinant(DisplacementField(u)).data
    np.testing.assert_allclose(det[1:-1, 1:-1, 1:-1], 1.1, atol=1e-12)


def test_jacobian_of_affine_field():
    rng = np.random.default_rng(6)
    dims = (7, 6, 8)
    A = rng.uniform(-0.3, 0.3, size=(3, 3))
    b = rng.uniform(-2, 2, size=3)
    x = np.indices(dims).astype(float)
    u = np.einsum("ij,j...->i...", A, x) + b[:, None, None, None]
    det = jacobian_determinant(DisplacementField(u)).data
    assert np.max(np.abs(det - np.linalg.det(np.eye(3) + A))) < 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(-2, 2), st.integers(-2, 2), st.integers(-2, 2), st.integers(0, 2 ** 31))
def test_property_integer_translation_is_index_shift(tx, ty, tz, seed):
    data = np.random.default_rng(seed).random((7, 7, 7))
    out = warp_volume(Volume(data), constant_field((7, 7, 7), (tx, ty, tz))).data

    def sl(t):
        # destination region whose sources stay inside the grid
        return slice(max(0, -t), 7 - max(0, t))

    dst = (sl(tx), sl(ty), sl(tz))
    src = tuple(slice(s.start + t, s.stop + t) for s, t in zip(dst, (tx, ty, tz)))
    assert np.array_equal(out[dst], data[src])

