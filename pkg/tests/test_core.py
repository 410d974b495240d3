import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nodalmc.core import (
    DegenerateNodeError,
    Model,
    NodeProximityError,
    SymmetryGroup,
    SymmetryOperation,
    UsageError,
    as_configuration,
    halton_points,
    local_energy,
    nodal_shape_velocity,
    verify_skew_symmetry,
)
from nodalmc.models import make_model


def test_permutation_parity_matches_sign_of_permutation():
    assert SymmetryOperation.permutation((1, 0)).parity == -1
    assert SymmetryOperation.permutation((1, 2, 0)).parity == 1
    assert SymmetryOperation.inversion(3).parity == -1
    assert SymmetryOperation.inversion(2).parity == 1


@given(st.permutations(range(4)))
def test_permutation_parity_equals_determinant(perm):
    op = SymmetryOperation.permutation(perm)
    assert op.parity == round(np.linalg.det(op.matrix))


def test_symmetric_group_has_n_factorial_elements():
    g = SymmetryGroup.permutations(3)
    assert len(g) == 6
    assert len(g.odd_elements()) == 3
    assert len(g.even_subgroup()) == 3
    assert g.fermionic


def test_group_without_closure_is_rejected():
    swap = SymmetryOperation.permutation((1, 0, 2))
    cyc = SymmetryOperation.permutation((1, 2, 0))
    with pytest.raises(UsageError):
        SymmetryGroup((SymmetryOperation.identity(3), swap, cyc))


def test_generated_group_is_closed():
    swap = SymmetryOperation.permutation((1, 0, 2))
    cyc = SymmetryOperation.permutation((1, 2, 0))
    assert len(SymmetryGroup.generated_by([swap, cyc])) == 6


def test_as_configuration_validates():
    assert as_configuration([1, 2]).dtype == float
    with pytest.raises(UsageError):
        as_configuration([[1.0, 2.0]])
    with pytest.raises(UsageError):
        as_configuration([1.0, np.nan])
    with pytest.raises(UsageError):
        as_configuration([1.0], dimension=2)


def test_halton_points_are_deterministic_and_inside():
    a = halton_points([-1, 0], [1, 2], 100)
    b = halton_points([-1, 0], [1, 2], 100)
    assert np.array_equal(a, b)
    assert np.all(a > [-1, 0]) and np.all(a < [1, 2])


def test_model_rejects_potential_breaking_the_group():
    swap = SymmetryOperation.permutation((1, 0))
    group = SymmetryGroup((SymmetryOperation.identity(2), swap))
    with pytest.raises(UsageError, match="invariant"):
        Model("bad", 2, lambda x: x[:, 0] ** 2, group, [-1, -1], [1, 1])


def test_model_rejects_potential_below_floor():
    with pytest.raises(UsageError):
        Model("neg", 1, lambda x: -1.0 - x[:, 0] ** 2, SymmetryGroup.trivial(1), [-1], [1])


def test_local_energy_of_exact_states_is_exact():
    tf = make_model("two_fermion_trap")
    ow = make_model("odd_well3d")
    rng = np.random.default_rng(0)
    for x in rng.normal(size=(20, 2)):
        assert local_energy(tf.model, tf.family, [0.0], x) == 2.0
    for x in rng.normal(size=(20, 3)):
        assert local_energy(ow.model, ow.family, [0.0, 0.0], x) == 4.0


def test_local_energy_refuses_points_on_the_node():
    tf = make_model("two_fermion_trap")
    with pytest.raises(NodeProximityError):
        local_energy(tf.model, tf.family, [0.0], [0.3, 0.3])


def test_skew_symmetry_residual_is_zero_for_catalog():
    for name in ("two_fermion_trap", "odd_well3d"):
        e = make_model(name)
        pts = halton_points(e.model.lower, e.model.upper, 64)
        assert verify_skew_symmetry(e.family, e.theta0 + 0.1, e.model.group, pts) < 1e-12


def test_nodal_shape_velocity_of_tilted_plane():
    ow = make_model("odd_well3d")
    # on the plane x + 0.1 y = 0, d psi/d theta = (yG, zG) and |grad psi| = G sqrt(1.01)
    x = np.array([-0.1, 1.0, 0.5])
    v = nodal_shape_velocity(ow.family, [0.1, 0.0], x)
    assert np.allclose(v, np.array([1.0, 0.5]) / np.sqrt(1.01))


def test_nodal_shape_velocity_errors():
    ow = make_model("odd_well3d")
    with pytest.raises(UsageError):
        nodal_shape_velocity(ow.family, [0.0, 0.0], [0.5, 0.0, 0.0])
    with pytest.raises(DegenerateNodeError):
        nodal_shape_velocity(ow.family, [0.0, 0.0], [0.0, 0.0, 1e4])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3))
def test_inversion_flips_odd_well_trial(x):
    ow = make_model("odd_well3d")
    x = np.array(x)
    a = ow.family.value([0.2, -0.1], x[None])[0]
    b = ow.family.value([0.2, -0.1], -x[None])[0]
    assert b == pytest.approx(-a, abs=1e-15)
