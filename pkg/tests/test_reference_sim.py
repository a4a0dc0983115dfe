import numpy as np
import pytest
from numpy.testing import assert_allclose

from reference_sim import simulate_nonlinear
from simulator import integrate_lti

T_END = 5.0
DT = 1e-3


def _linear_step(model):
    segment = integrate_lti(model.a, model.b_nr, np.zeros(model.n), (0.0, T_END), DT, u=[1.0])
    return segment.times, segment.states @ model.c_dg.T


@pytest.mark.slow
def test_linear_model_tracks_the_nonlinear_response(desk_runner):
    builder = desk_runner.event_builder(1)
    model = builder.build()
    times, dv_linear = _linear_step(model)
    reference = simulate_nonlinear(
        desk_runner.network,
        builder.pre_states,
        builder.post_states,
        T_END,
        desk_runner.references,
        desk_runner.offline,
        t_eval=times,
    )
    assert_allclose(reference.times, times, atol=1e-12)
    for g, uid in enumerate(model.dg_ids):
        linear = dv_linear[:, g]
        nonlinear = reference.dv[uid]
        peak = max(float(np.max(np.abs(nonlinear))), 1e-6)
        assert nonlinear[0] == pytest.approx(0.0, abs=1e-8)
        assert np.max(np.abs(linear - nonlinear)) <= 0.02 * peak


@pytest.mark.slow
def test_unchanged_topology_stays_at_equilibrium(desk_runner):
    states = desk_runner.configuration_before(1)
    reference = simulate_nonlinear(
        desk_runner.network, states, states, 1.0, desk_runner.references, desk_runner.offline,
    )
    for series in reference.dv.values():
        assert np.max(np.abs(series)) < 1e-7
