import numpy as np
import pytest
from numpy.testing import assert_allclose

from configuration import SynthesisSettings
from errors import AssemblyError, Infeasible, ModelError, ParameterError, RecoveryError, SolverError
from fvc_synth import (
    FvController,
    SynthesisCertificate,
    UncertaintySpec,
    Vertex,
    assemble_program,
    change_of_variables,
    conditioning_program,
    delay_augmented,
    enumerate_polytope,
    reconstruct_q,
    recover_controller,
    solve_lmi,
    synthesize,
)
from lmi import NUMPY_OPS
from netmodel import DnStateSpace
from ssanalysis import assemble_delayed, assemble_overall, frequency_response, hinf_norm, pade_delay_factor, plant_system
from utils import matrix_from_json


class CountingBuilder:
    """Fake model builder: A_DN scales with K_A, C_DG is a fresh array every call."""

    def __init__(self, fail_above_ka=None):
        self.calls = []
        self.fail_above_ka = fail_above_ka

    def build(self, ka=1.0, lf=1.0, sr=1.0):
        self.calls.append((ka, lf, sr))
        if self.fail_above_ka is not None and ka > self.fail_above_ka:
            raise ModelError("A_DN is not Hurwitz")
        return DnStateSpace(
            a=-np.diag([ka, lf, 1.0]),
            b_dg=np.ones((3, 1)),
            b_nr=sr * np.ones((3, 1)),
            c_dg=np.array([[1.0, 0.0, 0.0]]),
        )


def _spd(rng, n, shift=0.5):
    x = rng.standard_normal((n, n))
    return x @ x.T / n + shift * np.eye(n)


# ---------------------------------------------------------------------------
# Polytope


def test_uncertainty_fractions_are_checked():
    with pytest.raises(ParameterError):
        UncertaintySpec(ka=1.0)
    with pytest.raises(ParameterError):
        UncertaintySpec(lf=-0.1)
    assert UncertaintySpec.from_mapping({"ka": 0.3}).active() == ("ka",)


@pytest.mark.parametrize(
    "spec, count",
    [
        (UncertaintySpec(), 1),
        (UncertaintySpec(ka=0.3, lf=0.3), 4),
        (UncertaintySpec(ka=0.3, lf=0.3, sr=0.3), 8),
    ],
)
def test_vertex_count(spec, count):
    builder = CountingBuilder()
    vertices = enumerate_polytope(builder, spec)
    assert len(vertices) == count
    assert len(builder.calls) == count
    assert len({v.signature for v in vertices}) == count
    for vertex in vertices[1:]:
        assert vertex.model.c_dg is not vertices[0].model.c_dg
        assert_allclose(vertex.model.c_dg, vertices[0].model.c_dg)


def test_vertex_output_maps_are_independent_copies():
    vertices = enumerate_polytope(CountingBuilder(), UncertaintySpec(ka=0.3, lf=0.3))
    vertices[1].model.c_dg[0, 0] = 5.0
    assert vertices[0].model.c_dg[0, 0] == 1.0
    assert all(v.model.c_dg[0, 0] == 1.0 for v in vertices[2:])


def test_no_uncertainty_is_the_nominal_model():
    (vertex,) = enumerate_polytope(CountingBuilder(), UncertaintySpec())
    assert vertex.signature == "nominal"
    assert_allclose(vertex.model.a, -np.diag([1.0, 1.0, 1.0]))


def test_vertex_scales_follow_sign_combinations():
    vertices = enumerate_polytope(CountingBuilder(), UncertaintySpec(ka=0.3, sr=0.2))
    assert [v.signature for v in vertices] == ["ka-,sr-", "ka-,sr+", "ka+,sr-", "ka+,sr+"]
    assert vertices[0].scales == pytest.approx({"ka": 0.7, "lf": 1.0, "sr": 0.8})
    assert vertices[-1].scales["ka"] == pytest.approx(1.3)


def test_vertex_failure_names_the_signature():
    with pytest.raises(AssemblyError) as info:
        enumerate_polytope(CountingBuilder(fail_above_ka=1.0), UncertaintySpec(ka=0.3))
    assert info.value.block == "vertex [ka+]"


def test_parallel_enumeration_keeps_vertex_order():
    serial = enumerate_polytope(CountingBuilder(), UncertaintySpec(ka=0.1, lf=0.2, sr=0.3))
    parallel = enumerate_polytope(CountingBuilder(), UncertaintySpec(ka=0.1, lf=0.2, sr=0.3), threads=4)
    assert [v.signature for v in serial] == [v.signature for v in parallel]
    for s, p in zip(serial, parallel):
        assert_allclose(s.model.a, p.model.a)


def test_exciter_gain_vertices_only_move_generator_rows(desk_runner):
    builder = desk_runner.event_builder(1)
    nominal = builder.build()
    for ka in (0.7, 1.3):
        shifted = builder.build(ka=ka)
        rows = np.flatnonzero(np.max(np.abs(shifted.a - nominal.a), axis=1) > 1e-12)
        assert rows.size > 0
        assert all(nominal.state_labels[r].startswith("sg1.") for r in rows)
        assert_allclose(shifted.c_dg, nominal.c_dg)


# ---------------------------------------------------------------------------
# Solve


def test_scalar_plant_beats_open_loop(scalar_builder):
    result = synthesize(scalar_builder, UncertaintySpec(), SynthesisSettings(gamma=10.0))
    cert = result.certificate
    assert cert.optimal
    assert cert.hinf_bound < 1.0

    model = result.vertices[0].model
    assert hinf_norm(plant_system(model)) == pytest.approx(1.0, rel=1e-6)
    closed = assemble_overall(model, result.controller).system()
    grid = np.logspace(-4, 5, 4000)
    sweep = frequency_response(closed, grid).peak
    assert sweep <= cert.hinf_bound * (1 + 1e-4)
    assert result.verification.passed


def test_zero_gamma_is_infeasible_in_the_energy_family(scalar_plant):
    program = assemble_program([Vertex("nominal", {}, scalar_plant)], gamma=0.0)
    with pytest.raises(Infeasible) as info:
        solve_lmi(program)
    assert info.value.family == "energy"


def test_resolving_is_deterministic(scalar_plant):
    program = assemble_program([Vertex("nominal", {}, scalar_plant)], gamma=10.0)
    first = solve_lmi(program)
    second = solve_lmi(program)
    assert second.j_opt == pytest.approx(first.j_opt, rel=1e-7, abs=1e-9)


def test_energy_relations_hold_at_the_optimum(scalar_plant):
    program = assemble_program([Vertex("nominal", {}, scalar_plant)], gamma=2.0)
    cert = solve_lmi(program)
    assert np.trace(cert.u) < 2.0
    diff = cert.l2 - cert.l1
    schur = cert.u - cert.l5 @ np.linalg.solve(diff, cert.l5.T)
    assert np.min(np.linalg.eigvalsh(diff)) > 0
    assert np.min(np.linalg.eigvalsh(schur)) > -1e-6
    assert all(margin > -1e-6 for margin in cert.margins.values())


def test_certificate_document(scalar_plant):
    cert = solve_lmi(assemble_program([Vertex("nominal", {}, scalar_plant)], gamma=10.0))
    doc = cert.to_dict()
    assert doc["status"] == "optimal"
    assert doc["hinf_bound"] == pytest.approx(np.sqrt(doc["j_opt"]))
    assert set(doc["variables"]) == {"l1", "l2", "l3", "l4", "l5", "u"}
    assert doc["variables"]["l5"]["rows"] == 1
    assert_allclose(matrix_from_json(doc["variables"]["l3"]), cert.l3)


# ---------------------------------------------------------------------------
# Recovery


def _certificate(l1, l2, l3, l4, l5, u=None):
    m = l5.shape[0]
    return SynthesisCertificate(
        status="optimal", gamma=10.0, eps=1e-7, j_opt=0.5,
        l1=l1, l2=l2, l3=l3, l4=l4, l5=l5, u=np.eye(m) if u is None else u,
    )


def test_recovery_with_identity_scaled_partition(rng):
    n, m = 3, 2
    l3, l4, l5 = rng.standard_normal((n, n)), rng.standard_normal((n, 1)), rng.standard_normal((m, n))
    fvc = recover_controller(_certificate(2 * np.eye(n), np.eye(n), l3, l4, l5), check_stability=False)
    assert_allclose(fvc.a_ff, l3, atol=1e-12)
    assert_allclose(fvc.b_ff, -l4, atol=1e-12)
    assert_allclose(fvc.c_ff, -l5, atol=1e-12)


def test_change_of_variables_round_trip(rng):
    n, m = 4, 2
    l1 = _spd(rng, n)
    l2 = l1 + _spd(rng, n, shift=0.2)
    l3, l4, l5 = rng.standard_normal((n, n)), rng.standard_normal((n, 1)), rng.standard_normal((m, n))
    fvc = recover_controller(_certificate(l1, l2, l3, l4, l5), check_stability=False)
    back = change_of_variables(fvc, l1, l2)
    for original, recovered in zip((l3, l4, l5), back):
        assert np.max(np.abs(recovered - original)) <= 1e-8 * np.max(np.abs(original))


def test_near_singular_partition_is_rejected(rng):
    n = 3
    l1 = _spd(rng, n)
    with pytest.raises(RecoveryError, match="eps"):
        recover_controller(_certificate(l1, l1.copy(), np.eye(n), np.ones((n, 1)), np.ones((1, n))))


def test_unstable_recovered_controller_is_rejected():
    n = 2
    with pytest.raises(RecoveryError, match="Hurwitz"):
        recover_controller(_certificate(2 * np.eye(n), np.eye(n), np.eye(n), np.ones((n, 1)), np.ones((1, n))))


def test_inactive_controller_is_silent():
    fvc = FvController.inactive(3, 2)
    assert fvc.order == 3
    assert np.all(fvc.c_ff == 0)
    assert np.max(np.linalg.eigvals(fvc.a_ff).real) < 0


# ---------------------------------------------------------------------------
# Verification building blocks


def test_lyapunov_reconstruction(rng):
    n = 4
    l1 = _spd(rng, n)
    l2 = l1 + _spd(rng, n, shift=0.3)
    q, q_inv = reconstruct_q(l1, l2)
    assert np.max(np.abs(q @ q_inv - np.eye(2 * n))) < 1e-8
    assert np.min(np.linalg.eigvalsh(q)) > 0
    t = np.block([[l2, l1], [-l2, np.zeros((n, n))]])
    assert_allclose(t.T @ q @ t, np.block([[l2, l1], [l1, l1]]), atol=1e-9)


@pytest.mark.parametrize("delta, positive", [(0.1, True), (-0.1, False)])
def test_energy_block_schur_equivalence(rng, delta, positive):
    n = 3
    program = assemble_program([Vertex("nominal", {}, CountingBuilder().build())], gamma=10.0, equilibrate=False)
    c3 = program.block("C3")
    for _ in range(10):
        l1 = _spd(rng, n)
        diff = _spd(rng, n, shift=0.2)
        l5 = rng.standard_normal((1, n))
        u = l5 @ np.linalg.solve(diff, l5.T) + delta * np.eye(1)
        values = {"L1": l1, "L2": l1 + diff, "L5": l5, "U": u}
        smallest = np.min(np.linalg.eigvalsh(c3.build(NUMPY_OPS, values)))
        assert (smallest > 0) == positive


# ---------------------------------------------------------------------------
# Desk network (three feeder buses behind the substation slack)


@pytest.mark.slow
def test_desk_certificate_verifies(desk_runner):
    builder = desk_runner.event_builder(1)
    result = synthesize(builder, UncertaintySpec(), SynthesisSettings())
    report = result.verification
    assert report.passed, [c.to_dict() for c in report.checks if c.status == "fail"]
    assert report.qqinv_residual < 1e-8
    assert report.q_min_eig > 0
    assert all(r < 1e-6 for r in report.congruence_residual.values())
    assert np.isfinite(report.energy_gramian)

    closed = hinf_norm(assemble_overall(result.vertices[0].model, result.controller).system())
    open_loop = hinf_norm(plant_system(result.vertices[0].model))
    assert closed <= result.certificate.hinf_bound * (1 + 1e-4)
    assert closed < open_loop


@pytest.mark.slow
def test_desk_robust_vertices(desk_runner):
    builder = desk_runner.event_builder(1)
    nominal = synthesize(builder, UncertaintySpec(), SynthesisSettings(), verify=False)
    robust = synthesize(builder, UncertaintySpec(ka=0.3, lf=0.3, sr=0.3), SynthesisSettings(), threads=2)
    assert len(robust.vertices) == 8
    assert robust.verification.passed
    assert all(np.isfinite(h) for h in robust.verification.hinf.values())
    assert robust.certificate.hinf_bound > 0
    assert nominal.verification is None
    # covering the polytope corners costs at least the nominal bound
    assert robust.certificate.j_min >= nominal.certificate.j_min * (1 - 1e-6)
    assert robust.certificate.j_opt >= nominal.certificate.j_min * (1 - 1e-6)


@pytest.mark.slow
def test_desk_relaxing_gamma_never_hurts(desk_runner):
    builder = desk_runner.event_builder(0)
    vertices = enumerate_polytope(builder, UncertaintySpec())
    tight = solve_lmi(assemble_program(vertices, gamma=5.0))
    loose = solve_lmi(assemble_program(vertices, gamma=10.0))
    assert loose.j_min <= tight.j_min * (1 + 1e-6) + 1e-9


@pytest.mark.slow
@pytest.mark.parametrize("index", [0, 1])
def test_desk_robust_controller_is_hurwitz(desk_runner, index):
    builder = desk_runner.event_builder(index)
    result = synthesize(builder, UncertaintySpec(ka=0.3, lf=0.3, sr=0.3), SynthesisSettings(), threads=2)
    cert = result.certificate
    assert cert.raw_status == "optimal"
    assert cert.t_gap > 0
    assert np.max(np.linalg.eigvals(result.controller.a_ff).real) < 0
    assert result.verification.passed, [c.to_dict() for c in result.verification.checks if c.status == "fail"]


# ---------------------------------------------------------------------------
# Conditioning


def test_conditioning_program_caps_j_and_l2(scalar_plant):
    program = assemble_program([Vertex("nominal", {}, scalar_plant)], gamma=10.0, equilibrate=False)
    conditioned = conditioning_program(program, j_level=0.5, scale=4.0)
    assert conditioned.maximize
    assert conditioned.objective == "T_gap"
    assert conditioned.families() == ["bounded_real", "conditioning", "coupling", "energy", "positivity"]
    values = {"J": 0.6, "L1": np.eye(1), "L2": 3.0 * np.eye(1), "T_gap": 0.25}
    assert conditioned.block("level").slack(values) == pytest.approx(-0.1)
    assert conditioned.block("gap").slack(values) == pytest.approx(0.25)
    assert conditioned.block("scale").slack(values) == pytest.approx(0.25)
    with pytest.raises(AssemblyError):
        conditioning_program(program, j_level=0.5, scale=0.0)


def test_conditioned_optimum_stays_within_the_backoff(scalar_plant):
    program = assemble_program([Vertex("nominal", {}, scalar_plant)], gamma=10.0)
    settings = SynthesisSettings(backoff=1e-2)
    cert = solve_lmi(program, settings)
    assert cert.raw_status == "optimal"
    assert cert.j_min <= cert.j_opt * (1 + 1e-6) + 1e-9
    assert cert.j_opt <= cert.j_min * (1 + cert.backoff) + 10 * program.eps
    assert cert.t_gap > 0
    assert np.min(np.linalg.eigvalsh(cert.l2 - cert.l1)) > 0
    doc = cert.to_dict()
    assert doc["j_min"] == pytest.approx(cert.j_min)
    assert "wall_time_s" not in doc


def test_unconditioned_solve_keeps_the_first_optimum(scalar_plant):
    program = assemble_program([Vertex("nominal", {}, scalar_plant)], gamma=10.0)
    cert = solve_lmi(program, SynthesisSettings(condition=False))
    assert cert.j_opt == cert.j_min
    assert cert.backoff == 0.0
    assert cert.to_dict()["t_gap"] is None


def test_backoff_must_be_positive():
    with pytest.raises(ParameterError):
        SynthesisSettings(backoff=0.0)


def test_failed_conditioning_is_a_solver_error(scalar_plant, monkeypatch):
    import fvc_synth

    def refuse(program, j_level, scale):
        raise SolverError("scripted failure")

    monkeypatch.setattr(fvc_synth, "conditioning_program", refuse)
    program = assemble_program([Vertex("nominal", {}, scalar_plant)], gamma=10.0)
    with pytest.raises(SolverError, match="conditioned"):
        solve_lmi(program)


# ---------------------------------------------------------------------------
# Communication delay


def test_delay_augmented_plant_delays_the_actuator(rng):
    a, b, c = (rng.standard_normal((3, 3)) - 3 * np.eye(3), rng.standard_normal((3, 2)), rng.standard_normal((2, 3)))
    model = DnStateSpace(a=a, b_dg=b, b_nr=np.ones((3, 1)), c_dg=c, dg_ids=("sg1", "ig1"))
    delayed = delay_augmented(model, 0.2)
    assert (delayed.n, delayed.m) == (3 + 4, 2)
    assert delayed.state_labels[-1] == "delay.ig1.1"
    pade = pade_delay_factor(0.2)
    for w in (0.01, 1.0, 30.0):
        s = 1j * w
        actuator = delayed.c_dg @ np.linalg.solve(s * np.eye(delayed.n) - delayed.a, delayed.b_dg)
        expected = c @ np.linalg.solve(s * np.eye(3) - a, b) * pade.evaluate(s)
        assert_allclose(actuator, expected, rtol=1e-9, atol=1e-12)
        switching = delayed.c_dg @ np.linalg.solve(s * np.eye(delayed.n) - delayed.a, delayed.b_nr)
        assert_allclose(switching, c @ np.linalg.solve(s * np.eye(3) - a, np.ones((3, 1))), rtol=1e-9, atol=1e-12)


def test_zero_delay_keeps_the_model(scalar_plant):
    assert delay_augmented(scalar_plant, 0.0) is scalar_plant


def test_delay_designed_controller_bounds_the_delayed_loop(scalar_builder, scalar_plant):
    result = synthesize(scalar_builder, UncertaintySpec(), SynthesisSettings(delay_s=0.3))
    assert result.controller.order == scalar_plant.n + 2 * scalar_plant.m
    assert result.certificate.delay_s == 0.3
    assert result.verification.passed
    delayed = assemble_delayed(scalar_plant, result.controller, 0.3).system
    grid = np.logspace(-4, 4, 4000)
    assert frequency_response(delayed, grid).peak <= result.certificate.hinf_bound * (1 + 1e-4)
    assert result.certificate.hinf_bound <= hinf_norm(plant_system(scalar_plant)) * (1 + 1e-3)
