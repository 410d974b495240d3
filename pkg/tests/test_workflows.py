import math

import numpy as np
import pytest

from nodalmc.core import NumericalError, UsageError
from nodalmc.diffusion import PropagationConfig
from nodalmc.estimators import EstimateWithError
from nodalmc.models import make_model
from nodalmc.workflows import (
    GradientRun,
    OptimizeResult,
    OptimizeStep,
    check_lambda,
    nmc_optimize,
    run_gradient,
    run_shape,
)


def _est(v, s):
    return EstimateWithError(v, s, 100.0, "test")


def test_check_lambda():
    check_lambda(_est(1.0, 0.1), 0.6)
    with pytest.raises(NumericalError):
        check_lambda(_est(1.0, 0.1), 0.8)


def test_consistency_z():
    g = GradientRun(_est(1.0, 0.0), _est(np.array([1.0, 0.0]), np.array([0.3, 0.0])),
                    _est(np.array([0.6, 0.0]), np.array([0.4, 0.0])), None)
    assert g.consistency_z().tolist() == pytest.approx([0.8, 0.0])
    assert GradientRun(_est(1.0, 0.0), None, _est(0.0, 1.0), None).consistency_z() is None


def _step(k, E, s, ok=True):
    return OptimizeStep(k, np.zeros(1), E, s, np.zeros(1), np.zeros((1, 1)), 0.5, ok)


def test_monotone_within_ignores_rejected_steps():
    res = OptimizeResult(np.zeros(1), _est(1.0, 0.1),
                         [_step(0, 5.0, 0.1), _step(1, 9.0, 0.1, ok=False), _step(2, 5.2, 0.1)])
    assert res.monotone_within(2.0)
    assert not res.monotone_within(1.0)
    assert [s.iteration for s in res.accepted] == [0, 2]


def test_argument_validation():
    e = make_model("interval")
    cfg = PropagationConfig(dt=1e-3, T=0.1)
    with pytest.raises(UsageError):
        run_gradient(e, [0.0], cfg, 100, 0, forms=("sideways",))
    with pytest.raises(UsageError):
        run_shape(e, cfg, 100, 0, velocity="twist")
    with pytest.raises(UsageError):
        nmc_optimize(e, [0.0], cfg, 100, 0, form="diagonal")
    with pytest.raises(UsageError):
        run_shape(make_model("harmonic1d"), cfg, 100, 0)


def test_symmetry_forced_node_has_zero_gradient():
    e = make_model("two_fermion_trap")
    cfg = PropagationConfig(dt=0.005, T=1.0, init="trial")
    g = run_gradient(e, [0.0], cfg, 2000, 1, forms=("surface",))
    assert g.surface.value == 0.0 and g.surface.std_error == 0.0
    assert not math.copysign(1.0, g.surface.value) < 0


def test_optimizer_trace_shape():
    e = make_model("odd_well3d")
    cfg = PropagationConfig(dt=0.005, T=1.0, init="trial")
    res = nmc_optimize(e, [0.2, 0.1], cfg, 3000, 4, iterations=3)
    assert len(res.trace) == 3
    assert res.trace[0].accepted
    assert res.energy.value == pytest.approx(4.0, abs=0.1)
    d = res.trace[0].as_dict()
    assert d["theta"] == [0.2, 0.1] and len(d["gradient"]) == 2
