import math

import numpy as np
import pytest

from qrstab.system import build_system, canonical_theta, spectral_abscissa
from qrstab.weyl import TrigTerm

S2 = np.array([[0.0, 1.0], [-1.0, 0.0]])


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def desk():
    """theta = S2, R = 0, M = I, J = S2: A = -2I, B = 2 S2."""
    return build_system(S2, np.zeros((2, 2)), np.eye(2), S2)


@pytest.fixture
def desk_cosine():
    """H1 = cos(lambda0^T X) with lambda0 = e1 / sqrt(2)."""
    return [TrigTerm(r=1.0, lam=np.array([1.0 / math.sqrt(2.0), 0.0]), phi=0.0)]


def two_quadrature_pair(s: float) -> list[TrigTerm]:
    return [
        TrigTerm(r=1.0, lam=np.array([s / math.sqrt(2.0), 0.0]), phi=0.0),
        TrigTerm(r=1.0, lam=np.array([0.0, s / math.sqrt(2.0)]), phi=0.0),
    ]


def random_symmetric(rng, n, scale=1.0):
    K = rng.standard_normal((n, n))
    return scale * (K + K.T) / 2


def random_antisymmetric(rng, n, scale=1.0):
    K = rng.standard_normal((n, n))
    return scale * (K - K.T) / 2


def random_theta(rng, n, spread=0.3):
    """T diag(S2, ...) T^T with a well-conditioned T."""
    while True:
        T = np.eye(n) + spread * rng.standard_normal((n, n))
        if np.linalg.cond(T) < 20:
            return T @ canonical_theta(n // 2) @ T.T, T


def random_system(rng, n, m):
    theta, _ = random_theta(rng, n)
    return build_system(theta, random_symmetric(rng, n), rng.standard_normal((m, n)), random_antisymmetric(rng, m))


def random_hurwitz_system(rng, n, canonical=False, margin=0.1):
    """
    With M = c T^-1 and canonical J the drift is 2 theta R - 2c^2 I; small
    noise on M and R keeps it Hurwitz after rejection.
    """
    while True:
        if canonical:
            theta, T = canonical_theta(n // 2), np.eye(n)
        else:
            theta, T = random_theta(rng, n)
        c = rng.uniform(0.6, 1.2)
        M = c * np.linalg.inv(T) + 0.05 * rng.standard_normal((n, n))
        J = canonical_theta(n // 2)
        sys = build_system(theta, random_symmetric(rng, n, 0.1), M, J)
        if spectral_abscissa(sys.A) < -margin:
            return sys


def random_terms(rng, n, d, max_norm=1.0, phases=True):
    terms = []
    for _ in range(d):
        lam = rng.standard_normal(n)
        lam *= rng.uniform(0.2, 1.0) * max_norm / np.linalg.norm(lam)
        phi = rng.uniform(0, 2 * math.pi) if phases else 0.0
        terms.append(TrigTerm(r=rng.uniform(0.2, 1.0), lam=lam, phi=phi))
    return terms
