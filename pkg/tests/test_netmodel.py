import numpy as np
import pytest
from numpy.testing import assert_allclose

from components import zip_injection
from errors import ConfigurationError, ModelError
from netmodel import (
    AdmittancePair,
    Bus,
    DnStateSpace,
    IgUnit,
    Line,
    NetworkDescription,
    Switch,
    SwitchModelBuilder,
    assemble_dn_model,
    build_admittance,
    linearize_dgs,
    solve_steady_state,
    zip_load_jacobian,
)

from conftest import radial_network, zip_test_load


def test_two_bus_stamp():
    net = NetworkDescription(
        buses=(Bus("s", 4.16), Bus("b", 4.16)),
        lines=(Line("l", "s", "b", 1 / 26, 5 / 26),),
        switches=(),
        sg_units=(),
        ig_units=(),
        loads=(),
        slack="s",
    )
    adm = build_admittance(net, {})
    assert_allclose(adm.y, [[1 - 5j, -1 + 5j], [-1 + 5j, 1 - 5j]], atol=1e-12)
    assert adm.energized == ("s", "b")
    assert adm.dead == ()


def test_admittance_matches_incidence_oracle():
    ids = ["s", "a", "b", "c", "d"]
    lines = (
        Line("l1", "s", "a", 0.02, 0.08, 0.002),
        Line("l2", "a", "b", 0.03, 0.05),
        Line("l3", "a", "c", 0.01, 0.04, 0.004),
        Line("l4", "c", "d", 0.05, 0.09),
    )
    switches = (
        Switch("sw1", "TSW", "b", "d", False, 0.0, 0.2),
        Switch("sw2", "SSW", "s", "c", True, 0.01, 0.3),
    )
    net = NetworkDescription(tuple(Bus(i, 4.16) for i in ids), lines, switches, (), (), (), "s")
    adm = build_admittance(net, {"sw1": False, "sw2": True})

    oracle = np.zeros((5, 5), dtype=complex)
    for branch in lines + (switches[1],):
        e = np.zeros(5)
        e[ids.index(branch.from_bus)] = 1.0
        e[ids.index(branch.to_bus)] = -1.0
        oracle += np.outer(e, e) / complex(branch.r, branch.x)
        shunt = getattr(branch, "b", 0.0)
        oracle[ids.index(branch.from_bus), ids.index(branch.from_bus)] += 0.5j * shunt
        oracle[ids.index(branch.to_bus), ids.index(branch.to_bus)] += 0.5j * shunt
    assert_allclose(adm.y, oracle, atol=1e-12)

    # every 2x2 block of the real expansion is [[g, -b], [b, g]]
    for i in range(5):
        for j in range(5):
            block = adm.ydq[2 * i:2 * i + 2, 2 * j:2 * j + 2]
            g, b = oracle[i, j].real, oracle[i, j].imag
            assert_allclose(block, [[g, -b], [b, g]], atol=1e-12)


def test_island_without_slack_is_rejected():
    net = radial_network(
        lines=(Line("l1", "s", "b1", 0.01, 0.05),),
        switches=(Switch("sw", "TSW", "b1", "b2", False),),
    )
    with pytest.raises(ConfigurationError) as info:
        build_admittance(net, {"sw": False})
    assert info.value.buses == ["b2"]
    assert build_admittance(net, {"sw": False}, allow_dead_islands=True).dead == ("b2",)


def test_switch_states_must_match_the_network():
    net = radial_network(switches=(Switch("sw", "TSW", "b1", "b2", True),))
    with pytest.raises(ConfigurationError, match="missing"):
        build_admittance(net, {})


def test_unit_on_slack_bus_is_rejected(desk_scenario):
    ig = desk_scenario.network.ig_units[0]
    with pytest.raises(ConfigurationError):
        radial_network(ig_units=(IgUnit("ig", "s", ig.params, 0.1),))


def test_zip_power_flow_residual():
    load = zip_test_load(p_mw=0.4, q_mvar=0.2)
    net = radial_network(loads=(load,))
    op = solve_steady_state(net, {})
    assert op.residual < 1e-10

    # direct substitution: network current equals the load injection on every non-slack bus
    i_net = op.i
    b2 = op.buses.index("b2")
    inj = zip_injection(load, [op.v[b2].real, op.v[b2].imag], 1.0)
    assert abs(i_net[b2] - complex(inj[0], inj[1])) < 1e-10
    assert abs(i_net[op.buses.index("b1")]) < 1e-10
    assert op.voltage("s") == 1.0


def test_heavier_load_lowers_voltages():
    light = solve_steady_state(radial_network(loads=(zip_test_load(p_mw=0.3, q_mvar=0.1),)), {})
    heavy = solve_steady_state(radial_network(loads=(zip_test_load(p_mw=0.6, q_mvar=0.2),)), {})
    for bus in ("b1", "b2"):
        assert abs(heavy.voltage(bus)) < abs(light.voltage(bus)) < 1.0


def test_units_follow_dispatch(desk_scenario):
    net = desk_scenario.network
    op = solve_steady_state(net, net.initial_switch_states())
    assert op.dead == ("b3",)
    sg = op.dg["sg1"]
    assert sg.s.real == pytest.approx(0.1 / net.base_mva, abs=1e-9)
    assert abs(sg.v) == pytest.approx(1.0, abs=1e-9)
    ig = op.dg["ig1"]
    assert ig.s.real == pytest.approx(0.06 / net.base_mva, abs=1e-9)
    assert abs(ig.v) == pytest.approx(1.0, abs=1e-9)


def test_unit_in_dead_island_must_be_offline(desk_scenario):
    ig = desk_scenario.network.ig_units[0]
    net = radial_network(
        lines=(Line("l1", "s", "b1", 0.01, 0.05),),
        switches=(Switch("sw", "TSW", "b1", "b2", False),),
        ig_units=(IgUnit("ig", "b2", ig.params, 0.05),),
    )
    with pytest.raises(ConfigurationError) as info:
        solve_steady_state(net, {"sw": False})
    assert info.value.buses == ["b2"]
    op = solve_steady_state(net, {"sw": False}, offline=("ig",))
    assert op.dg == {}
    assert op.voltage("b2") == 0


def test_unchanged_topology_has_no_switching_input(desk_scenario):
    net = desk_scenario.network
    states = net.initial_switch_states()
    model = SwitchModelBuilder(net, states, states).build()
    assert np.all(model.b_nr == 0.0)


def test_event_model_structure(desk_runner):
    builder = desk_runner.event_builder(1)
    model = builder.build()
    assert (model.n, model.m) == (16, 2)
    assert model.dg_ids == ("sg1", "ig1")
    assert model.c_dg.shape == (2, 16)
    for row in model.c_dg:
        (k,) = np.flatnonzero(row)
        assert row[k] == 1.0
        assert model.state_labels[k].endswith(".vm")
    assert np.max(np.linalg.eigvals(model.a).real) < 0
    assert np.any(model.b_nr != 0)
    assert builder.restored_buses == ()
    assert builder.shed_buses == ()


def test_restoration_event_tracks_restored_loads(desk_runner):
    builder = desk_runner.event_builder(0)
    assert builder.restored_buses == ("b3",)
    assert builder.affected_loads == ("ld3",)
    model = builder.build()
    assert "b3" in model.bus_order
    assert model.disturbance_ids == ("ld1", "ld2", "ld3")


def test_parameter_scaling_only_touches_named_quantities(desk_scenario):
    net = desk_scenario.network
    scaled = net.scaled(ka=1.3, lf=0.7, loads=("ld3",), sr=1.3)
    assert scaled.sg_units[0].params.k_a == pytest.approx(1.3 * net.sg_units[0].params.k_a)
    assert scaled.ig_units[0].params.l_f == pytest.approx(0.7 * net.ig_units[0].params.l_f)
    assert scaled.loads[2].p_mw == pytest.approx(1.3 * net.loads[2].p_mw)
    assert scaled.loads[:2] == net.loads[:2]
    assert net.scaled() is net


def test_channel_count_mismatch_is_a_model_error():
    with pytest.raises(ModelError, match="channels"):
        DnStateSpace(a=-np.eye(2), b_dg=np.ones((2, 2)), b_nr=np.ones(2), c_dg=np.ones((1, 2)))


def test_direct_assembly_matches_builder(desk_scenario):
    net = desk_scenario.network
    states = net.initial_switch_states()
    adm = build_admittance(net, states, allow_dead_islands=True)
    op = solve_steady_state(net, states, {})
    lin = linearize_dgs(net.sg_units, net.ig_units, op)
    assert lin.a_x.shape[0] == sum(len(u.labels) for u in lin.units)
    assert lin.selector().shape == (len(lin.units), lin.a_x.shape[0])
    v0 = {b: op.voltage(b) for b in lin.bus_order}
    d_l = zip_load_jacobian(net.loads, v0, lin.bus_order, net.base_mva)
    assert d_l.shape == (2 * len(lin.bus_order),) * 2
    model = assemble_dn_model(lin, d_l, AdmittancePair(adm, adm), op)
    assert np.all(model.b_nr == 0.0)
    assert_allclose(model.a, SwitchModelBuilder(net, states, states).build().a, rtol=1e-9, atol=1e-12)


def test_load_levels_scale_the_named_loads(desk_scenario):
    net = desk_scenario.network
    busy = net.with_load_levels({"ld2": 1.2})
    assert busy.loads[1].p_mw == pytest.approx(1.2 * net.loads[1].p_mw)
    assert busy.loads[1].q_mvar == pytest.approx(1.2 * net.loads[1].q_mvar)
    assert busy.loads[0] == net.loads[0]
    assert net.with_load_levels({"ld1": 1.0}) is net
    assert net.with_load_levels(None) is net
    with pytest.raises(ConfigurationError, match="ld9"):
        net.with_load_levels({"ld9": 1.0})


def test_event_model_is_linearized_at_the_current_demand(desk_scenario):
    net = desk_scenario.network
    states = net.initial_switch_states()
    levels = {"ld1": 1.15, "ld2": 0.9}
    rated = SwitchModelBuilder(net, states, states).build()
    current = SwitchModelBuilder(net, states, states, load_levels=levels).build()
    prescaled = SwitchModelBuilder(net.with_load_levels(levels), states, states).build()
    assert not np.allclose(current.a, rated.a, rtol=1e-9, atol=1e-12)
    assert_allclose(current.a, prescaled.a, rtol=1e-9, atol=1e-12)
    assert_allclose(current.x0, prescaled.x0, rtol=1e-9, atol=1e-12)
    # disturbance columns stay per unit of rating
    for col, load in enumerate(current.disturbance_ids):
        factor = levels.get(load, 1.0)
        assert_allclose(factor * current.b_w[:, col], prescaled.b_w[:, col], rtol=1e-9, atol=1e-12)


def test_desk_feeder_is_three_buses_behind_the_substation(desk_scenario):
    net = desk_scenario.network
    assert net.slack == "sub"
    assert [b for b in net.bus_ids if b != net.slack] == ["b1", "b2", "b3"]
    assert (len(net.sg_units), len(net.ig_units)) == (1, 1)
