import math

import numpy as np
import pytest
import scipy.sparse as sp

from svddip.ct import (
    DEFAULT_PHOTONS,
    MU_MAX,
    FilteredAdjoint,
    MatrixOperator,
    ParallelGeometry,
    add_gaussian_noise,
    add_noise,
    apply_matrix,
    apply_matrix_T,
    disk_phantom,
    fbp,
    generate_ellipses,
    hu_to_mu,
    initial_reconstruction,
    load_matrix_operator,
    poisson_counts,
    radon_forward,
    save_matrix_operator,
    simulate_poisson_prelog,
)
from svddip.errors import InvalidArgumentError
from svddip.losses import psnr


# -- forward projection ---------------------------------------------------------------


def test_zero_image_gives_zero_sinogram():
    g = ParallelGeometry(16, 7, 25)
    assert np.all(radon_forward(np.zeros((16, 16)), g).data == 0)


@pytest.mark.parametrize("pixel_size", [1.0, 0.25])
def test_angle_zero_is_column_sums(rng, pixel_size):
    n = 20
    g = ParallelGeometry(n, 6, 30, pixel_size=pixel_size)
    x = rng.random((n, n))
    row0 = radon_forward(x, g).data[0]
    # With unit spacing, detector bin k lines up with column k - 5.
    expected = np.zeros(30)
    expected[5 : 5 + n] = x.sum(axis=0) * pixel_size
    np.testing.assert_allclose(row0, expected, rtol=0, atol=1e-8)


def test_disk_projection_identical_on_grid_symmetric_angles():
    # 0/90 and 45/135 degrees map the pixel grid onto itself, so a centred
    # disk must project identically there.
    g = ParallelGeometry(64, 4, 95)
    sino = radon_forward(disk_phantom(64, 0.35), g).data
    scale = np.abs(sino).max()
    assert np.abs(sino[0] - sino[2]).max() <= 1e-6 * scale
    assert np.abs(sino[1] - sino[3]).max() <= 1e-6 * scale


@pytest.mark.xfail(
    strict=True,
    reason="a pixelised disk is not rotationally symmetric; off-grid angles differ by a few percent",
)
def test_disk_projection_identical_at_every_angle():
    g = ParallelGeometry(64, 20, 95)
    sino = radon_forward(disk_phantom(64, 0.35), g).data
    assert np.abs(sino - sino[0]).max() <= 1e-6 * np.abs(sino).max()


def test_disk_projection_close_at_every_angle():
    g = ParallelGeometry(64, 20, 95)
    sino = radon_forward(disk_phantom(64, 0.35), g).data
    # Interpolation blurs the profile a little, so agreement is only approximate.
    np.testing.assert_allclose(sino.sum(axis=1), sino[0].sum(), rtol=1e-3)
    assert np.abs(sino - sino[0]).max() <= 0.05 * np.abs(sino).max()


def test_forward_is_linear(rng):
    g = ParallelGeometry(24, 9, 35)
    x1, x2 = rng.random((2, 24, 24))
    a, b = 1.7, -0.3
    lhs = radon_forward(a * x1 + b * x2, g).data
    rhs = a * radon_forward(x1, g).data + b * radon_forward(x2, g).data
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-9)


def test_adjoint_consistency_of_projector(rng):
    g = ParallelGeometry(24, 11, 41, detector_spacing=0.9)
    op = g.operator()
    x = rng.standard_normal((24, 24))
    y = rng.standard_normal(g.sino_shape)
    lhs = float(np.sum(op.forward(x) * y))
    rhs = float(np.sum(x * op.adjoint(y)))
    assert abs(lhs - rhs) <= 1e-8 * max(abs(lhs), 1.0)


def test_rotation_by_90_degrees_permutes_rows(rng):
    n, nd = 32, 47
    g = ParallelGeometry(n, 4, nd)
    x = rng.random((n, n))
    s = radon_forward(x, g).data
    r = radon_forward(np.rot90(x), g).data
    # Angle index k of the rotated image is angle k+2 of the original;
    # wrapping past pi flips the detector axis.
    for k in range(4):
        src = (k + 2) % 4
        expected = s[src] if k + 2 < 4 else s[src][::-1]
        np.testing.assert_allclose(r[k], expected, atol=1e-10)


def test_geometry_rejects_short_detector():
    with pytest.raises(InvalidArgumentError):
        ParallelGeometry(64, 20, 60)


def test_radon_shape_mismatch():
    with pytest.raises(InvalidArgumentError):
        radon_forward(np.zeros((8, 8)), ParallelGeometry(16, 4, 25))


# -- explicit matrices ----------------------------------------------------------------


def test_identity_matrix_operator(rng):
    op = MatrixOperator(sp.identity(16), (4, 4), (16,))
    x = rng.random((4, 4))
    np.testing.assert_array_equal(apply_matrix(x, op).data, x.ravel())


def test_zero_matrix_operator(rng):
    op = MatrixOperator(sp.csr_matrix((20, 16)), (4, 4), (20,))
    assert np.all(apply_matrix(rng.random((4, 4)), op).data == 0)


def test_matrix_adjoint_dot_product(rng):
    m = np.abs(rng.standard_normal((20, 16)))
    op = MatrixOperator(m, (4, 4), (20,))
    x = rng.standard_normal((4, 4))
    y = rng.standard_normal(20)
    lhs = float(apply_matrix(x, op).data @ y)
    rhs = float(np.sum(x * apply_matrix_T(y, op)))
    assert abs(lhs - rhs) < 1e-10


def test_matrix_dimension_mismatch(rng):
    op = MatrixOperator(np.ones((5, 4)), (2, 2), (5,))
    with pytest.raises(InvalidArgumentError):
        apply_matrix(np.ones(9), op)
    with pytest.raises(InvalidArgumentError):
        apply_matrix_T(np.ones(4), op)


def test_matrix_rejects_negative_weights():
    with pytest.raises(InvalidArgumentError):
        MatrixOperator(np.array([[1.0, -1.0]]))


def test_matrix_file_roundtrip(tmp_path):
    op = ParallelGeometry(16, 5, 25).operator()
    path = tmp_path / "op.txt"
    save_matrix_operator(path, op)
    assert path.read_text().splitlines()[0] == f"SVDDIPMAT1 {op.shape[0]} {op.shape[1]} {op.matrix.nnz}"
    back = load_matrix_operator(path, op.image_shape, op.sino_shape)
    assert (back.matrix != op.matrix).nnz == 0


@pytest.mark.parametrize(
    "body",
    [
        "SVDDIPMAT1 2 2 1\n0 5 1.0\n",
        "SVDDIPMAT1 2 2 2\n0 0 1.0\n",
        "SVDDIPMAT1 2 2 2\n0 0 1.0\n0 0 2.0\n",
        "NOTAMATRIX 2 2 0\n",
    ],
)
def test_matrix_file_validation(tmp_path, body):
    path = tmp_path / "bad.txt"
    path.write_text(body)
    with pytest.raises(InvalidArgumentError):
        load_matrix_operator(path)


# -- filtered back-projection ---------------------------------------------------------


def test_fbp_disk_roundtrip_psnr():
    g = ParallelGeometry(64, 180, 95)
    disk = disk_phantom(64, 0.4)
    rec = fbp(radon_forward(disk, g), g)
    assert psnr(rec, disk, 1.0) > 25.0


def test_fbp_zero_and_linearity(rng):
    g = ParallelGeometry(32, 30, 47)
    assert np.all(fbp(np.zeros(g.sino_shape), g) == 0)
    s1, s2 = rng.standard_normal((2,) + g.sino_shape)
    for filt in ("ramlak", "hann"):
        lhs = fbp(2.0 * s1 - 0.5 * s2, g, filt)
        rhs = 2.0 * fbp(s1, g, filt) - 0.5 * fbp(s2, g, filt)
        np.testing.assert_allclose(lhs, rhs, atol=1e-8)


def test_fbp_needs_two_angles():
    g = ParallelGeometry(16, 1, 25)
    with pytest.raises(InvalidArgumentError):
        fbp(np.zeros(g.sino_shape), g)


def test_fbp_rejects_unknown_filter():
    g = ParallelGeometry(16, 4, 25)
    with pytest.raises(InvalidArgumentError):
        fbp(np.zeros(g.sino_shape), g, "shepp")


def test_filtered_adjoint_recovers_mean():
    g = ParallelGeometry(32, 40, 47)
    op = MatrixOperator(g.operator().matrix, g.image_shape, g.sino_shape)
    x = disk_phantom(32, 0.3)
    rec = FilteredAdjoint(op)(op.forward(x))
    assert abs(rec.mean() - x.mean()) < 0.05 * x.mean()
    # Without geometry information the initial reconstruction falls back to it.
    rec2 = initial_reconstruction(op.forward(x), op, "ramlak")
    np.testing.assert_allclose(rec, rec2)


# -- noise ----------------------------------------------------------------------------


def test_gaussian_noise_zero_level_and_determinism(rng):
    y = rng.random((10, 20))
    np.testing.assert_array_equal(add_gaussian_noise(y, 0.0, 1).data, y)
    a = add_gaussian_noise(y, 0.05, 7).data
    b = add_gaussian_noise(y, 0.05, 7).data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, add_gaussian_noise(y, 0.05, 8).data)


def test_gaussian_noise_sigma():
    y = np.linspace(-1.0, 3.0, 10**6)
    noisy = add_gaussian_noise(y, 0.05, 3)
    target = 0.05 * np.mean(np.abs(y))
    assert abs(np.std(noisy.data - y) / target - 1) < 0.01
    assert noisy.noise == "gaussian 0.05"


def test_poisson_expectation_mode(rng):
    g = ParallelGeometry(16, 6, 25)
    x = rng.random((16, 16))
    y = simulate_poisson_prelog(x, g.operator(), expectation=True).data
    np.testing.assert_array_equal(y, g.operator().forward(x) / MU_MAX)


def test_poisson_count_variance_at_zero():
    counts = poisson_counts(np.zeros(10**6), DEFAULT_PHOTONS, 11)
    assert abs(counts.var() / DEFAULT_PHOTONS - 1) < 0.02


def test_poisson_postlog_mean_at_zero():
    y = add_noise(np.zeros(10**5), "poisson 4096", 5).data
    se = y.std() / math.sqrt(y.size)
    # -ln(N1/N0) has a small positive bias of about 1/(2 N0 mu_max); stay well inside 3 SE.
    assert abs(y.mean()) < 3 * se


def test_poisson_rejects_negative_projection():
    with pytest.raises(InvalidArgumentError):
        add_noise(-np.ones(4), "poisson 4096", 0)
    op = MatrixOperator(np.eye(4), (2, 2), (4,))
    with pytest.raises(InvalidArgumentError):
        simulate_poisson_prelog(-np.ones((2, 2)), op)


def test_poisson_clamps_zero_counts():
    # Huge attenuation gives zero counts, which must not produce inf.
    y = add_noise(np.full(1000, 1.0), "poisson 4096", 2).data
    assert np.all(np.isfinite(y))
    assert y.max() <= -math.log(0.1 / 4096) / MU_MAX + 1e-12


def test_unknown_noise_spec():
    with pytest.raises(InvalidArgumentError):
        add_noise(np.zeros(3), "speckle 1", 0)


@pytest.mark.parametrize("hu,mu", [(0, 20.0), (1000, 39.98), (-1000, 0.02)])
def test_hu_to_mu(hu, mu):
    assert hu_to_mu(hu) == pytest.approx(mu, abs=1e-12)


# -- phantoms -------------------------------------------------------------------------


def test_ellipses_determinism_and_range():
    a = generate_ellipses(64, rng_seed=3)
    np.testing.assert_array_equal(a, generate_ellipses(64, rng_seed=3))
    assert a.min() >= 0 and a.max() <= 1
    assert a.max() > 0
    assert not np.array_equal(a, generate_ellipses(64, rng_seed=4))


def test_ellipses_zero_override():
    assert np.all(generate_ellipses(32, max_ellipses=0) == 0)


def test_ellipses_min_size():
    with pytest.raises(InvalidArgumentError):
        generate_ellipses(8)
