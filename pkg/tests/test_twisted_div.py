import numpy as np
import pytest

from nssl import twisted_div as td
from nssl.errors import ConfigurationError, InconsistentDataError
from nssl.lagrangian import identity_field, matvec
from nssl.spectral import Grid

G = Grid((16, 16, 16))
TIMES = np.linspace(0.0, 1.0, 5)


def gradient_field():
    # grad of sin(x1) cos(2 x2) + 0.5 sin(x3 + x1)
    x = G.coords()
    return np.stack(
        [np.cos(x[0]) * np.cos(2 * x[1]) + 0.5 * np.cos(x[2] + x[0]),
         -2 * np.sin(x[0]) * np.sin(2 * x[1]),
         0.5 * np.cos(x[2] + x[0])])


class TestOperators:
    def test_identity_twist_is_one_sweep_projection(self):
        A = np.stack([identity_field(3, G.dims)] * len(TIMES))
        z = gradient_field()
        prob = td.manufactured_problem(G, TIMES, A, np.stack([z] * len(TIMES)))
        sol = td.solve_fixed_point(prob)
        assert np.max(np.abs(sol.z[0] - z)) < 1e-12
        assert max(sol.sweeps) <= 2

    def test_rotation_field_properties(self):
        A = td.rotation_field(G, TIMES, 0.2)
        prob = td.TwistedDivProblem(G, TIMES, A, np.zeros((len(TIMES), 3) + G.dims))
        assert abs(prob.deviation - 0.2) < 1e-3
        assert prob.gate_value <= td.DEFAULT_GATE


class TestSolver:
    def test_manufactured_solution_recovered(self):
        A = td.rotation_field(G, TIMES, 0.2)
        z = gradient_field()
        prob = td.manufactured_problem(G, TIMES, A, np.stack([z] * len(TIMES)))
        sol = td.solve_fixed_point(prob, tol=1e-13)
        assert np.max(np.abs(sol.z - z[None])) < 1e-10
        assert sol.max_contraction <= 0.25
        assert max(sol.residuals) < 1e-10
        assert not any(r.failed for r in sol.reports)
        assert set(sol.ledger) >= {"C_R", "C_g", "C_t"}

    def test_zero_data_zero_solution(self):
        A = td.rotation_field(G, TIMES, 0.2)
        sol = td.solve_fixed_point(td.TwistedDivProblem(G, TIMES, A, np.zeros((len(TIMES), 3) + G.dims)))
        assert np.max(np.abs(sol.z)) == 0.0

    def test_gate_violation_refused(self):
        A = td.rotation_field(G, TIMES, 0.5)
        prob = td.TwistedDivProblem(G, TIMES, A, np.zeros((len(TIMES), 3) + G.dims))
        with pytest.raises(ConfigurationError):
            td.solve_fixed_point(prob)

    def test_det_check(self):
        A = 1.1 * np.stack([identity_field(3, G.dims)] * len(TIMES))
        with pytest.raises(InconsistentDataError):
            td.TwistedDivProblem(G, TIMES, A, np.zeros((len(TIMES), 3) + G.dims))

    def test_inconsistent_g(self):
        A = np.stack([identity_field(3, G.dims)] * len(TIMES))
        R = np.zeros((len(TIMES), 3) + G.dims)
        g = np.ones((len(TIMES),) + G.dims)
        with pytest.raises(InconsistentDataError):
            td.TwistedDivProblem(G, TIMES, A, R, g=g)

    def test_residual_definition(self):
        A = td.rotation_field(G, TIMES, 0.2)
        z = gradient_field()
        g = td.divergence(G, matvec(A[0], z))
        assert td.residual(z, A[0], g, G) < 1e-12
