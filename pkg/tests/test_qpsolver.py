import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_grid_2d, feasible_samples, random_qp
from seqcl.qpsolver import QPInstance, read_dump, solve, verify_kkt, write_dump


def test_interior_point_is_returned_unchanged():
    inst = QPInstance([1.0, 2.0], [[1.0, 0.0]], 0.5)
    sol = solve(inst)
    assert sol.converged and np.array_equal(sol.z, inst.g) and np.all(sol.v == 0)
    assert verify_kkt(inst, sol) == 0.0


def test_halfspace_projection():
    inst = QPInstance([-1.0, 2.0], [[1.0, 0.0]], 0.0)
    sol = solve(inst)
    assert np.allclose(sol.z, [0.0, 2.0], atol=1e-12) and np.allclose(sol.v, [1.0], atol=1e-12)
    assert verify_kkt(inst, sol) < 1e-10
    best, _ = brute_force_grid_2d(inst.g, inst.G, 0.0, n=201)
    assert np.allclose(best, sol.z, atol=0.02)


def test_orthant_projection_against_grid():
    inst = QPInstance([-1.0, -1.0], np.eye(2), 0.0)
    sol = solve(inst)
    assert np.allclose(sol.z, [0.0, 0.0], atol=1e-12) and np.allclose(sol.v, [1.0, 1.0], atol=1e-12)
    _, grid_obj = brute_force_grid_2d(inst.g, inst.G, 0.0)
    assert inst.objective(sol.z) <= grid_obj + 1e-12


def test_zero_rows_are_dropped_or_reported():
    inst = QPInstance([1.0, -1.0], [[0.0, 0.0], [0.0, 1.0]], 0.0)
    sol = solve(inst)
    assert sol.converged and np.allclose(sol.z, [1.0, 0.0])
    bad = solve(QPInstance([1.0, -1.0], [[0.0, 0.0]], 0.5))
    assert bad.status == "fallback"


def test_infeasible_margin_falls_back_at_once():
    # opposite constraint rows cannot both exceed a positive margin
    for G in ([[1.0, 0.0], [-1.0, 0.0]], [[1.0, 1.0], [-1.0, 0.0], [0.0, -1.0]]):
        sol = solve(QPInstance([1.0, 1.0], G, 1.0))
        assert sol.status == "fallback" and sol.iterations == 0 and np.array_equal(sol.z, [1.0, 1.0])
    # the same rows with no margin are feasible (z = 0 satisfies them)
    sol = solve(QPInstance([1.0, 1.0], [[1.0, 0.0], [-1.0, 0.0]], 0.0))
    assert sol.converged and np.allclose(sol.z, [0.0, 1.0])


def test_nearly_opposite_rows_still_solve():
    inst = QPInstance([1.0, 1.0], [[1.0, 0.0], [-1.0, 1e-3]], 1.0)
    sol = solve(inst)
    assert sol.converged and verify_kkt(inst, sol) < 1e-8
    assert np.allclose(sol.z, [1.0, 2000.0])


def test_dimension_errors():
    with pytest.raises(ValueError):
        QPInstance([1.0, 2.0], [[1.0, 2.0, 3.0]])
    with pytest.raises(ValueError):
        QPInstance([np.nan], [[1.0]])


@pytest.mark.parametrize("seed", range(100))
def test_random_five_constraint_instances_beat_sampled_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 30))
    g, G = rng.normal(size=n), rng.normal(size=(5, n))
    gamma = float(rng.choice([0.0, 0.5]))
    inst = QPInstance(g, G, gamma)
    sol = solve(inst)
    assert sol.converged and verify_kkt(inst, sol) < 1e-8
    pts = feasible_samples(g, G, gamma, sol.z, rng)
    assert len(pts) > 100
    obj = 0.5 * ((pts - g) ** 2).sum(axis=1)
    assert inst.objective(sol.z) <= obj.min() + 1e-7


def test_dump_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    inst = QPInstance(*random_qp(rng))
    sol = solve(inst)
    write_dump(tmp_path / "d.txt", inst, sol)
    inst2, sol2 = read_dump(tmp_path / "d.txt")
    assert np.array_equal(inst2.g, inst.g) and np.array_equal(inst2.G, inst.G) and inst2.gamma == inst.gamma
    assert np.array_equal(sol2.z, sol.z) and sol2.status == sol.status


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_projection_is_idempotent(seed):
    inst = QPInstance(*random_qp(np.random.default_rng(seed)))
    z = solve(inst).z
    again = solve(QPInstance(z, inst.G, inst.gamma)).z
    assert np.allclose(again, z, rtol=1e-7, atol=1e-7 * max(1.0, np.abs(z).max()))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100))
def test_scale_equivariance(seed, c):
    g, G, gamma = random_qp(np.random.default_rng(seed))
    z = solve(QPInstance(g, G, gamma)).z
    zc = solve(QPInstance(c * g, G, c * gamma)).z
    assert np.allclose(zc, c * z, rtol=1e-6, atol=1e-6 * c * max(1.0, np.abs(z).max()))
