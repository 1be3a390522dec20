import numpy as np
import pytest
import scipy.linalg as sla

from fnrd.assembly import assemble_mass, assemble_stiffness
from fnrd.errors import ConfigurationError, DecompositionError
from fnrd.mesh import build_mesh
from fnrd.model import ModelParams
from fnrd.spectral import (UNIT_OPERATOR, SpeciesOperator,
                           apply_operator_function, decompose,
                           fractional_norm, get_spectrum, load_spectrum,
                           modal_transform, pencil_hash, phi_scalar,
                           phi_values, save_spectrum, sobolev_norm)


@pytest.fixture(scope="module")
def pencil3():
    mesh = build_mesh(2, 3)
    K = assemble_stiffness(mesh)
    M = assemble_mass(mesh)
    return mesh, K, M, decompose(K, M)


# -- decomposition ---------------------------------------------------------------

def test_1d_level1_matches_dense_oracle():
    mesh = build_mesh(1, 1)
    K = assemble_stiffness(mesh)
    M = assemble_mass(mesh)
    spec = decompose(K, M)
    # independent 3x3 oracle: eigenvalues of M^-1 K via the nonsymmetric solver
    w = np.linalg.eigvals(np.linalg.solve(M.toarray(), K.toarray()))
    w = np.sort(w.real)
    w[0] = 0.0
    assert np.allclose(spec.theta, w, rtol=1e-12, atol=1e-12)


def test_constant_mode_is_first(pencil3):
    _, _, M, spec = pencil3
    assert spec.theta[0] == 0.0
    assert spec.theta[1] > 0
    v0 = spec.Phi[:, 0]
    assert np.abs(v0 - v0.mean()).max() <= 1e-10 * abs(v0.mean())


def test_m_orthonormal_columns(pencil3):
    _, _, M, spec = pencil3
    G = spec.Phi.T @ (M @ spec.Phi)
    assert np.abs(G - np.eye(spec.n)).max() <= 1e-10


def test_pencil_residual(pencil3):
    _, K, M, spec = pencil3
    R = K.toarray() @ spec.Phi - (M.toarray() @ spec.Phi) * spec.theta
    assert np.abs(R).max() <= 1e-9 * spec.theta.max()


def test_first_nonconstant_eigenvalue_near_pi_squared():
    target = np.pi ** 2
    errs = {}
    for level in (4, 5):
        mesh = build_mesh(2, level)
        spec = decompose(assemble_stiffness(mesh), assemble_mass(mesh))
        errs[level] = spec.theta[1] - target
    assert abs(errs[5]) <= 1e-2 * target
    assert 3.5 <= errs[4] / errs[5] <= 4.5  # O(h^2) convergence


def test_decompose_rejects_mismatched_dims():
    K = assemble_stiffness(build_mesh(1, 2))
    M = assemble_mass(build_mesh(1, 3))
    with pytest.raises(DecompositionError):
        decompose(K, M)


def test_sign_convention_deterministic(pencil3):
    mesh, K, M, spec = pencil3
    again = decompose(K, M)
    assert np.array_equal(spec.Phi, again.Phi)
    for j in range(spec.n):
        col = spec.Phi[:, j]
        nz = np.nonzero(np.abs(col) > 1e-12 * np.abs(col).max())[0]
        assert col[nz[0]] > 0


# -- modal transforms -------------------------------------------------------------

def test_modal_transform_of_eigenvector_is_unit_vector(pencil3):
    _, _, M, spec = pencil3
    for j in (0, 3, spec.n - 1):
        c = modal_transform(spec, M, spec.Phi[:, j], "to-modal")
        e = np.zeros(spec.n)
        e[j] = 1.0
        assert np.abs(c - e).max() <= 1e-10


def test_modal_round_trip_and_parseval(pencil3):
    _, _, M, spec = pencil3
    rng = np.random.default_rng(21)
    v = rng.standard_normal(spec.n)
    c = modal_transform(spec, M, v, "to-modal")
    back = modal_transform(spec, M, c, "from-modal")
    assert np.linalg.norm(back - v) <= 1e-10 * np.linalg.norm(v)
    assert np.sum(c * c) == pytest.approx(v @ (M @ v), rel=1e-10)


def test_modal_transform_validates(pencil3):
    _, _, M, spec = pencil3
    with pytest.raises(ConfigurationError):
        modal_transform(spec, M, np.ones(spec.n + 1), "to-modal")
    with pytest.raises(ConfigurationError):
        modal_transform(spec, M, np.ones(spec.n), "sideways")


# -- phi functions -----------------------------------------------------------------

def test_phi_taylor_limits_exact():
    assert phi_scalar(1, 0.0) == 1.0
    assert phi_scalar(2, 0.0) == 0.5


def test_phi1_at_minus_one():
    assert phi_scalar(1, -1.0) == pytest.approx(1.0 - np.exp(-1.0),
                                                rel=1e-15)
    assert phi_scalar(1, -1.0) == pytest.approx(0.6321205588, abs=1e-10)


def test_phi_recurrence_at_minus_three():
    z = -3.0
    assert phi_scalar(2, z) == pytest.approx(
        (phi_scalar(1, z) - 1.0) / z, abs=1e-14)


def test_phi_matches_mpmath_reference():
    import mpmath
    mpmath.mp.dps = 50
    for z in -np.logspace(-9, np.log10(50), 40):
        zm = mpmath.mpf(float(z))
        ref1 = float(mpmath.expm1(zm) / zm)
        ref2 = float((mpmath.expm1(zm) - zm) / zm ** 2)
        assert phi_scalar(1, float(z)) == pytest.approx(ref1, rel=1e-14)
        assert phi_scalar(2, float(z)) == pytest.approx(ref2, rel=1e-14)


def test_phi_branch_continuity():
    for k in (1, 2):
        inside = phi_scalar(k, -0.1)
        outside = phi_scalar(k, -0.1 * (1 + 1e-12))
        assert abs(inside - outside) <= 1e-13


def test_phi_rejects_bad_order():
    with pytest.raises(ConfigurationError):
        phi_values(3, np.array([-1.0]))


# -- operator actions ---------------------------------------------------------------

def test_exp_at_zero_time_is_identity(pencil3):
    _, _, M, spec = pencil3
    op = SpeciesOperator.from_params(ModelParams(), 1)
    rng = np.random.default_rng(31)
    v = rng.standard_normal(spec.n)
    out = apply_operator_function(spec, M, op, "exp", 0.0, v)
    assert np.linalg.norm(out - v) <= 1e-12 * np.linalg.norm(v)


def test_constant_mode_decays_at_shift_rate(pencil3):
    _, _, M, spec = pencil3
    op = SpeciesOperator.from_params(ModelParams(), 1)
    assert op.b == 10.0
    v = np.ones(spec.n)
    for t in (0.01, 0.1):
        out = apply_operator_function(spec, M, op, "exp", t, v)
        assert np.allclose(out, np.exp(-10.0 * t), atol=1e-12)


def _dense_generator(ctx_matrices, op):
    K, M = ctx_matrices
    return -np.linalg.solve(M.toarray(), op.a * K.toarray()
                            + op.b * M.toarray())


def test_actions_match_dense_expm_oracle():
    mesh = build_mesh(1, 3)
    K = assemble_stiffness(mesh)
    M = assemble_mass(mesh)
    spec = decompose(K, M)
    params = ModelParams()
    rng = np.random.default_rng(41)
    v = rng.standard_normal(spec.n)
    dt = 1e-2
    for i in (1, 2, 3):
        op = SpeciesOperator.from_params(params, i)
        A = _dense_generator((K, M), op)
        E = sla.expm(dt * A)
        Z = dt * A
        P1 = np.linalg.solve(Z, E - np.eye(spec.n))
        P2 = np.linalg.solve(Z, np.linalg.solve(Z, E - np.eye(spec.n) - Z))
        got_e = apply_operator_function(spec, M, op, "exp", dt, v)
        got_p1 = apply_operator_function(spec, M, op, "phi1", dt, v)
        got_p2 = apply_operator_function(spec, M, op, "phi2", dt, v)
        assert np.linalg.norm(got_e - E @ v) <= 1e-9 * np.linalg.norm(E @ v)
        assert np.linalg.norm(got_p1 - P1 @ v) <= 1e-9 * np.linalg.norm(P1 @ v)
        assert np.linalg.norm(got_p2 - P2 @ v) <= 1e-9 * np.linalg.norm(P2 @ v)


def test_phi1_operator_identity(pencil3):
    """phi1(tA) v equals (tA)^{-1} (e^{tA} - I) v."""
    _, K, M, spec = pencil3
    op = SpeciesOperator.from_params(ModelParams(), 2)
    rng = np.random.default_rng(43)
    v = rng.standard_normal(spec.n)
    t = 0.05
    lhs = apply_operator_function(spec, M, op, "phi1", t, v)
    A = _dense_generator((K, M), op)
    rhs = np.linalg.solve(t * A, sla.expm(t * A) @ v - v)
    assert np.linalg.norm(lhs - rhs) <= 1e-9 * np.linalg.norm(rhs)


def test_semigroup_property(pencil3):
    _, _, M, spec = pencil3
    op = SpeciesOperator.from_params(ModelParams(), 3)
    rng = np.random.default_rng(47)
    for _ in range(5):
        v = rng.standard_normal(spec.n)
        t, s = rng.uniform(0.0, 0.1, 2)
        one = apply_operator_function(spec, M, op, "exp", t,
                                      apply_operator_function(
                                          spec, M, op, "exp", s, v))
        two = apply_operator_function(spec, M, op, "exp", t + s, v)
        assert np.linalg.norm(one - two) <= 1e-10 * np.linalg.norm(two)


def test_monotone_decay(pencil3):
    _, K, M, spec = pencil3
    rng = np.random.default_rng(53)
    for i in (1, 2, 3):
        op = SpeciesOperator.from_params(ModelParams(), i)
        v = rng.standard_normal(spec.n)
        n0 = sobolev_norm(M, K, 0, v)
        for t in (0.01, 0.05):
            out = apply_operator_function(spec, M, op, "exp", t, v)
            assert sobolev_norm(M, K, 0, out) <= np.exp(-op.b * t) * n0 * \
                (1 + 1e-12)


def test_frac_power_validates_range(pencil3):
    _, _, M, spec = pencil3
    with pytest.raises(ConfigurationError):
        apply_operator_function(spec, M, UNIT_OPERATOR, "frac_power", 0.0,
                                np.ones(spec.n), s=2.5)


# -- norms -------------------------------------------------------------------------

def test_fractional_norm_s0_is_l2(pencil3):
    _, K, M, spec = pencil3
    rng = np.random.default_rng(59)
    v = rng.standard_normal(spec.n)
    got = fractional_norm(spec, M, UNIT_OPERATOR, 0.0, v)
    assert got == pytest.approx(np.sqrt(v @ (M @ v)), rel=1e-12)


def test_fractional_norm_of_eigenvector(pencil3):
    _, _, M, spec = pencil3
    op = SpeciesOperator.from_params(ModelParams(), 1)
    j = 5
    mu = op.a * spec.theta[j] + op.b
    for s in (-1.0, 0.5, 2.0):
        got = fractional_norm(spec, M, op, s, spec.Phi[:, j])
        assert got == pytest.approx(mu ** (s / 2), rel=1e-10)


def test_fractional_norm_s1_unit_operator_is_h1(pencil3):
    _, K, M, spec = pencil3
    rng = np.random.default_rng(61)
    v = rng.standard_normal(spec.n)
    got = fractional_norm(spec, M, UNIT_OPERATOR, 1.0, v)
    ref = np.sqrt(v @ (K @ v) + v @ (M @ v))
    assert got == pytest.approx(ref, rel=1e-10)


def test_sobolev_norm_of_constants():
    mesh = build_mesh(2, 3)
    M = assemble_mass(mesh)
    K = assemble_stiffness(mesh)
    c = -2.3
    v = np.full(mesh.n_nodes, c)
    assert sobolev_norm(M, K, 0, v) == pytest.approx(abs(c), rel=1e-13)
    assert sobolev_norm(M, K, 1, v) == pytest.approx(abs(c), rel=1e-13)


def test_sobolev_norm_of_coordinate_function():
    mesh = build_mesh(2, 3)
    M = assemble_mass(mesh)
    K = assemble_stiffness(mesh)
    v = mesh.nodes[:, 0]
    assert sobolev_norm(M, K, 1, v) == pytest.approx(np.sqrt(4.0 / 3.0),
                                                     rel=1e-13)


def test_sobolev_norm_three_species_euclidean():
    mesh = build_mesh(2, 2)
    M = assemble_mass(mesh)
    K = assemble_stiffness(mesh)
    rng = np.random.default_rng(67)
    U = rng.standard_normal((mesh.n_nodes, 3))
    total = sobolev_norm(M, K, 1, U)
    per = [sobolev_norm(M, K, 1, U[:, j]) for j in range(3)]
    assert total == pytest.approx(np.sqrt(np.sum(np.square(per))), rel=1e-13)


# -- uniformity properties ----------------------------------------------------------

def test_inverse_inequality_uniform_in_level():
    """H1/L2 ratios of random P1 functions scale like 1/h, uniformly."""
    rng = np.random.default_rng(71)
    worst = {}
    for level in range(2, 7):
        mesh = build_mesh(2, level)
        M = assemble_mass(mesh)
        K = assemble_stiffness(mesh)
        ratios = []
        for _ in range(20):
            v = rng.standard_normal(mesh.n_nodes)
            ratios.append(mesh.h * sobolev_norm(M, K, 1, v)
                          / sobolev_norm(M, K, 0, v))
        worst[level] = max(ratios)
    vals = list(worst.values())
    assert max(vals) / min(vals) < 2.0


def test_smoothing_estimate_uniform():
    """sqrt(t) ||A^(1/2) e^{tA} v|| / ||v|| is bounded uniformly in t and h."""
    rng = np.random.default_rng(73)
    sup_by_level = {}
    for level in (2, 3, 4):
        mesh = build_mesh(2, level)
        M = assemble_mass(mesh)
        K = assemble_stiffness(mesh)
        spec = decompose(K, M)
        op = UNIT_OPERATOR
        sup = 0.0
        for t in np.logspace(-4, -1, 7):
            for _ in range(5):
                v = rng.standard_normal(spec.n)
                ev = apply_operator_function(spec, M, op, "exp", t, v)
                num = fractional_norm(spec, M, op, 1.0, ev) * np.sqrt(t)
                sup = max(sup, num / sobolev_norm(M, K, 0, v))
        sup_by_level[level] = sup
    vals = list(sup_by_level.values())
    assert max(vals) <= 0.7  # sup_x sqrt(x) e^-x ~ 0.43 plus shift effects
    assert max(vals) / min(vals) < 1.5


# -- disk cache ----------------------------------------------------------------------

def test_spectrum_cache_round_trip(tmp_path):
    mesh = build_mesh(2, 2)
    K = assemble_stiffness(mesh)
    M = assemble_mass(mesh)
    spec = get_spectrum(mesh, K, M, cache_dir=tmp_path)
    loaded = load_spectrum(tmp_path, mesh, pencil_hash(K, M))
    assert loaded is not None
    assert np.array_equal(loaded.theta, spec.theta)
    assert np.array_equal(loaded.Phi, spec.Phi)
    meta = (tmp_path / "spectrum_d2_l2" / "meta.json").read_text()
    assert '"level": 2' in meta


def test_spectrum_cache_hash_mismatch_recomputes(tmp_path):
    mesh = build_mesh(2, 2)
    K = assemble_stiffness(mesh)
    M = assemble_mass(mesh)
    save_spectrum(decompose(K, M), tmp_path, mesh, "bogus")
    with pytest.warns(UserWarning, match="hash mismatch"):
        assert load_spectrum(tmp_path, mesh, pencil_hash(K, M)) is None
    spec = get_spectrum(mesh, K, M, cache_dir=tmp_path)
    assert load_spectrum(tmp_path, mesh, pencil_hash(K, M)) is not None
