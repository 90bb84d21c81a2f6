import math

import numpy as np
import pytest

from conftest import S2, random_hurwitz_system, random_symmetric, random_terms, two_quadrature_pair
from qrstab import AllInfeasible, Infeasible, InvalidParameter
from qrstab.lmi import (
    Objective,
    SylvesterOperatorMatrix,
    decay_margin,
    single_cosine_lmi,
    gronwall_envelope,
    lmi_matrix,
    operator_matrix,
    refine_parameters,
    scan_mu1,
    solve_certificate,
    vec,
)
from qrstab.system import spectral_abscissa
from qrstab.weyl import (
    FreeParameters,
    PerturbationEnvelope,
    TrigTerm,
    envelope_single_cos,
    envelope_trig,
    trig_envelope_builder,
)

GAMMA_DESK = np.array([[0.0, 0.0], [-1.0, 0.0]])


@pytest.fixture
def desk_envelope():
    return PerturbationEnvelope(mu1=1.0, gammas=(GAMMA_DESK,))


def test_desk_operator_matrix(desk, desk_envelope):
    K = operator_matrix(desk.A, desk_envelope)
    np.testing.assert_allclose(K.K, -3 * np.eye(4) + np.kron(GAMMA_DESK.T, GAMMA_DESK.T), atol=1e-15)
    assert decay_margin(K) == pytest.approx(3.0, abs=1e-9)


def test_pure_lyapunov_operator():
    envelope = PerturbationEnvelope(mu1=1.0, gammas=(np.zeros((2, 2)),))
    K = operator_matrix(-np.eye(2), envelope)
    np.testing.assert_allclose(K.K, -np.eye(4))
    assert decay_margin(K) == pytest.approx(1.0)
    tiny = PerturbationEnvelope(mu1=1e-12, gammas=(np.zeros((2, 2)),))
    A = np.array([[-1.0, 2.0], [0.0, -3.0]])
    lyapunov = np.kron(np.eye(2), A.T) + np.kron(A.T, np.eye(2))
    np.testing.assert_allclose(operator_matrix(A, tiny).K, lyapunov, atol=1e-11)


def test_positive_eigenvalue_is_infeasible(desk_envelope):
    K = SylvesterOperatorMatrix(K=np.diag([0.5, -1.0, -1.0, -1.0]), A=np.eye(2), envelope=desk_envelope)
    assert decay_margin(K) == pytest.approx(-0.5)


def test_operator_matches_direct_evaluation(rng):
    sys = random_hurwitz_system(rng, 4)
    envelope = envelope_trig(random_terms(rng, 4, 3), sys.theta, 0.7)
    K = operator_matrix(sys.A, envelope)
    for _ in range(100):
        Pi = random_symmetric(rng, 4)
        direct = lmi_matrix(sys.A, envelope, Pi)
        assert np.linalg.norm(vec(K.apply(Pi)) - vec(direct)) <= 1e-12 * np.linalg.norm(Pi)


def test_desk_certificate(desk, desk_envelope):
    cert = solve_certificate(desk, desk_envelope, gamma=2.0)
    np.testing.assert_allclose(cert.Pi, np.diag([2.0, 1.0]), atol=1e-9)
    assert cert.ms_bound == pytest.approx(6.0, abs=1e-9)
    assert cert.decay_margin == pytest.approx(3.0, abs=1e-9)
    assert cert.second_moment_bound == pytest.approx(6.0, abs=1e-9)
    assert cert.lmi_residual == pytest.approx(-1.0, abs=1e-9)
    assert cert.ms_bound == pytest.approx(cert.pi_bbt / cert.gamma)


def test_default_gamma_is_half_the_margin(desk, desk_envelope):
    cert = solve_certificate(desk, desk_envelope)
    assert cert.gamma == pytest.approx(1.5)


def test_certificate_residual_on_random_instances(rng):
    for _ in range(10):
        sys = random_hurwitz_system(rng, 4, margin=0.4)
        mu1 = -spectral_abscissa(sys.A) / 2
        envelope = envelope_trig(random_terms(rng, 4, 2, max_norm=0.1), sys.theta, mu1)
        cert = solve_certificate(sys, envelope)
        Q = np.eye(4)
        residual = lmi_matrix(sys.A, envelope, cert.Pi, cert.gamma) + Q
        assert np.linalg.eigvalsh(residual)[-1] <= 1e-8 * max(1.0, np.linalg.norm(cert.Pi))
        assert cert.min_eigenvalue > 0


def test_gamma_beyond_margin(desk, desk_envelope):
    with pytest.raises(Infeasible) as e:
        solve_certificate(desk, desk_envelope, gamma=3.1)
    assert e.value.margin == pytest.approx(3.0)
    assert e.value.exit_code == 2


def test_invalid_Q(desk, desk_envelope):
    with pytest.raises(InvalidParameter):
        solve_certificate(desk, desk_envelope, Q=np.array([[1.0, 0.0], [0.0, -1.0]]))
    with pytest.raises(InvalidParameter):
        solve_certificate(desk, desk_envelope, gamma=-1.0)


def test_gronwall_envelope(desk, desk_envelope):
    cert = solve_certificate(desk, desk_envelope, gamma=2.0)
    values = gronwall_envelope(cert, 3.0, [0.0, math.log(2) / 2, 50.0])
    np.testing.assert_allclose(values, [3.0, 4.5, 6.0], atol=1e-9)
    with pytest.raises(ValueError):
        gronwall_envelope(cert, 3.0, [1.0, 0.5])


def test_single_cosine_reduced_lmi(rng):
    theta = S2
    for _ in range(10):
        A = rng.standard_normal((2, 2))
        lambda0 = rng.standard_normal(2)
        mu1, gamma = rng.uniform(0.2, 3.0), rng.uniform(0.0, 1.0)
        Pi = random_symmetric(rng, 2)
        envelope = envelope_single_cos(lambda0, theta, mu1)
        np.testing.assert_allclose(
            single_cosine_lmi(A, theta, lambda0, mu1, gamma, Pi),
            lmi_matrix(A, envelope, Pi, gamma),
            atol=1e-12 * max(1.0, np.abs(lmi_matrix(A, envelope, Pi, gamma)).max()),
        )


def test_scan_desk(desk, desk_cosine):
    builder = trig_envelope_builder(desk_cosine, desk.theta)
    result = scan_mu1(desk, builder, [0.5, 1.0, 2.0], Objective.MAX_GAMMA_STAR)
    assert [row.mu1 for row in result.table] == [0.5, 1.0, 2.0]
    assert all(row.feasible for row in result.table)
    np.testing.assert_allclose([row.decay_margin for row in result.table], [3.5, 3.0, 2.0], atol=1e-9)
    assert result.mu1 == 0.5

    result = scan_mu1(desk, builder, [0.5, 1.0, 2.0], "min_ms_bound")
    best = min(row.ms_bound for row in result.table)
    assert result.certificate.ms_bound == pytest.approx(best)


def test_scan_is_order_independent(desk, desk_cosine):
    builder = trig_envelope_builder(desk_cosine, desk.theta)
    serial = scan_mu1(desk, builder, [0.5, 1.0, 2.0, 3.0])
    parallel = scan_mu1(desk, builder, [0.5, 1.0, 2.0, 3.0], max_workers=4)
    assert serial.table == parallel.table
    assert serial.mu1 == parallel.mu1


def test_scan_errors(desk, desk_cosine):
    builder = trig_envelope_builder(desk_cosine, desk.theta)
    with pytest.raises(InvalidParameter):
        scan_mu1(desk, builder, [])
    with pytest.raises(InvalidParameter):
        scan_mu1(desk, builder, [0.5, 1.0], Q=-np.eye(2))
    strong = trig_envelope_builder(two_quadrature_pair(10.0), desk.theta)
    with pytest.raises(AllInfeasible) as e:
        scan_mu1(desk, strong, [0.5, 1.0, 2.0])
    assert all(margin < 0 for margin in e.value.margins.values())


def test_two_quadrature_pair_margin(desk):
    envelope = envelope_trig(two_quadrature_pair(1.0), desk.theta, 1.0)
    assert decay_margin(operator_matrix(desk.A, envelope)) == pytest.approx(1.0, abs=1e-9)


def test_margin_decreases_as_gammas_grow(rng):
    for _ in range(10):
        sys = random_hurwitz_system(rng, 4)
        envelope = envelope_trig(random_terms(rng, 4, 2), sys.theta, 0.5)
        margins = [decay_margin(operator_matrix(sys.A, envelope.scaled(s))) for s in (1.0, 1.5, 2.0, 4.0)]
        assert all(b <= a + 1e-10 for a, b in zip(margins, margins[1:]))


def test_small_perturbations_are_certified(rng):
    for _ in range(20):
        sys = random_hurwitz_system(rng, int(rng.choice([2, 4])))
        mu1 = -spectral_abscissa(sys.A) / 2
        terms = random_terms(rng, sys.n, int(rng.integers(1, 4)), max_norm=3.0)
        for halvings in range(30):
            scaled = [TrigTerm(t.r, t.lam / 2 ** halvings, t.phi) for t in terms]
            envelope = envelope_trig(scaled, sys.theta, mu1)
            if decay_margin(operator_matrix(sys.A, envelope)) > 0:
                solve_certificate(sys, envelope)
                break
        else:
            pytest.fail("no feasible certificate after 30 halvings")


def test_refinement_never_worse(desk):
    p = [TrigTerm(1.0, np.array([0.5, 0.0]), 0.4), TrigTerm(0.5, np.array([0.0, 0.5]), 1.0)]
    start = solve_certificate(desk, envelope_trig(p, desk.theta, 1.0))
    params, refined = refine_parameters(desk, p, 1.0, sweeps=2)
    assert isinstance(params, FreeParameters)
    assert refined.ms_bound <= start.ms_bound + 1e-12


def test_refinement_keeps_fixed_gamma(desk):
    p = [TrigTerm(1.0, np.array([0.5, 0.0]), 0.4), TrigTerm(0.5, np.array([0.0, 0.5]), 1.0)]
    start = solve_certificate(desk, envelope_trig(p, desk.theta, 1.0))
    _, refined = refine_parameters(desk, p, 1.0, sweeps=1, gamma=start.gamma)
    assert refined.gamma == start.gamma
    assert refined.decay_margin > start.gamma
    assert refined.ms_bound <= start.ms_bound + 1e-12
