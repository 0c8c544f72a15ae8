"""Engine tests: direction sampling, per-direction solves against the
hand-derived LP oracle, tube assembly and interpolation queries, metrics,
coupling modes, DT baseline, serialization round-trips, and Monte Carlo
validation of the chance margins."""

import dataclasses
import io
import math

import numpy as np
import pytest

from ctflex import engine
from ctflex.blocks import ChanceMargins
from ctflex.instances import (
    ess_symmetric, three_node, twelve_node, two_node,
)

CFG1 = engine.AssessmentConfig(directions=2, workers=1)


@pytest.fixture(scope="module")
def toy_tube():
    return engine.assess(three_node(), engine.AssessmentConfig(
        directions=2, workers=1))


@pytest.fixture(scope="module")
def gap_tube():
    # constant unity-pf load only: import works, everything else is a gap
    return engine.assess(two_node(), engine.AssessmentConfig(
        directions=2, workers=1))


@pytest.fixture(scope="module")
def sym_tube():
    return engine.assess(ess_symmetric(), engine.AssessmentConfig(
        directions=6, workers=1))


# -- direction sampling ---------------------------------------------------------


def test_sample_directions_k2():
    assert engine.sample_directions(2) == pytest.approx([0.0, math.pi / 2])
    assert engine.all_directions(2) == pytest.approx(
        [0.0, math.pi / 2, math.pi, 3 * math.pi / 2])


def test_sample_directions_k4_uniform():
    thetas = engine.sample_directions(4)
    assert thetas == pytest.approx([0, math.pi / 4, math.pi / 2,
                                    3 * math.pi / 4])
    gaps = np.diff(engine.all_directions(4))
    assert gaps.max() - gaps.min() == pytest.approx(0.0, abs=1e-15)


def test_sample_directions_too_few():
    with pytest.raises(ValueError):
        engine.sample_directions(1)
    with pytest.raises(ValueError):
        engine.AssessmentConfig(directions=1)


# -- subproblem structure ---------------------------------------------------------


def test_theta_zero_forces_reactive_to_zero():
    model = three_node()
    asm = engine.build_subproblem(model, 0.0, CFG1)
    sol = engine.solve_assembled(asm, CFG1)
    assert sol.status == "optimal"
    for m in asm.periods:
        for vid in asm.layouts[m].q0:
            assert sol.values[vid] == pytest.approx(0.0, abs=1e-9)


def test_theta_half_pi_forces_active_to_zero():
    model = three_node()
    asm = engine.build_subproblem(model, math.pi / 2, CFG1)
    sol = engine.solve_assembled(asm, CFG1)
    assert sol.status == "optimal"
    for m in asm.periods:
        for vid in asm.layouts[m].p0:
            assert sol.values[vid] == pytest.approx(0.0, abs=1e-10)


def test_hand_lp_oracle_three_directions():
    # closed forms on the toy: A(0) = integral of the load, A(pi/2) = 0,
    # A(pi) = integral of (forecast - load)
    model = three_node()
    cases = {0.0: 3600.0 * 0.5, math.pi / 2: 0.0, math.pi: 3600.0 * 0.2}
    for theta, want in cases.items():
        s = engine.solve_slice(model, theta, CFG1)
        assert s.status == "optimal"
        assert s.objective == pytest.approx(want, abs=1e-6)


def test_affine_optimum_reproduced_exactly():
    # theta = 0: S0(t) = load ramp, affine in t, exactly representable
    model = three_node()
    s = engine.solve_slice(model, 0.0, CFG1)
    traj = engine.FlexTube((s,), 0.0, 900.0, 4).trajectory(0)
    for t in np.linspace(0.0, 3600.0, 41):
        want = 0.4 + 0.2 * t / 3600.0
        assert traj.evaluate(t) == pytest.approx(want, abs=1e-7)


def test_infeasible_direction_recorded():
    # no reactive source: pure reactive import is impossible
    model = two_node()
    s = engine.solve_slice(model, math.pi / 2, CFG1)
    assert s.status == "infeasible"
    assert s.coeffs is None


def test_deterministic_repeat_solve():
    model = three_node()
    a = engine.solve_slice(model, 0.0, CFG1)
    b = engine.solve_slice(model, 0.0, CFG1)
    assert np.allclose(a.coeffs, b.coeffs, atol=1e-9)


# -- tube assembly and queries ----------------------------------------------------


def test_assemble_tube_rejects_duplicates():
    model = three_node()
    s = engine.solve_slice(model, 0.0, CFG1)
    with pytest.raises(ValueError, match="duplicate"):
        engine.assemble_tube([s, s], model)
    with pytest.raises(ValueError, match="no slices"):
        engine.assemble_tube([], model)


def test_tube_keeps_gaps(gap_tube):
    assert gap_tube.gaps == [math.pi / 2, math.pi, 3 * math.pi / 2]
    assert len(gap_tube.slices) == 4


def test_toy_tube_fully_feasible(toy_tube):
    assert toy_tube.gaps == []


def test_query_point_at_sample(toy_tube):
    p, q = engine.query_point(toy_tube, 0.0, 0.0)
    assert p == pytest.approx(0.4, abs=1e-7)
    assert q == pytest.approx(0.0, abs=1e-9)


def test_query_point_antipode(toy_tube):
    got = engine.query_point(toy_tube, math.pi, 3600.0)
    # down direction: S0 = forecast - load = 0.1 at the horizon end
    assert got[0] == pytest.approx(-0.1, abs=1e-7)
    assert got[1] == pytest.approx(0.0, abs=1e-9)


def test_query_point_gap_neighbor(gap_tube):
    assert engine.query_point(gap_tube, math.pi / 4, 1800.0) is None


def test_query_point_outside_horizon(toy_tube):
    with pytest.raises(ValueError):
        engine.query_point(toy_tube, 0.0, 1e9)


def test_query_point_interpolates_on_segment(sym_tube):
    t0 = 1800.0
    thetas = sym_tube.directions
    a = engine.query_point(sym_tube, float(thetas[1]), t0)
    b = engine.query_point(sym_tube, float(thetas[2]), t0)
    mid_theta = 0.5 * (thetas[1] + thetas[2])
    mid = engine.query_point(sym_tube, float(mid_theta), t0)
    assert mid[0] == pytest.approx(0.5 * (a[0] + b[0]), abs=1e-9)
    assert mid[1] == pytest.approx(0.5 * (a[1] + b[1]), abs=1e-9)


# -- metrics ------------------------------------------------------------------------


def test_metric_m_counts_coefficient_sums():
    coeffs = np.ones((4, 4))
    slices = tuple(
        engine.Slice(k * math.pi / 3, "optimal", coeffs, 3600.0,
                     (900.0,) * 4)
        for k in range(6)
    )
    tube = engine.FlexTube(slices, 0.0, 900.0, 4)
    # one direction contributes 4 coefficients x 4 periods = 16
    assert engine.metric_M(tube, [0.0]) == pytest.approx(16.0)
    assert engine.metric_M(tube) == pytest.approx(96.0)


def test_metric_m_infeasible_contributes_zero():
    slices = tuple(
        engine.Slice(k * math.pi / 3, "infeasible", None, None, None)
        for k in range(6)
    )
    tube = engine.FlexTube(slices, 0.0, 900.0, 4)
    assert engine.metric_M(tube) == 0.0


def test_metric_m_requires_sampled_direction():
    tube = engine.FlexTube(
        (engine.Slice(0.0, "optimal", np.ones((1, 4)), 900.0, (900.0,)),),
        0.0, 900.0, 1)
    with pytest.raises(ValueError, match="not among"):
        engine.metric_M(tube, [0.123])


def test_penetration_metrics_three_node():
    model = three_node()
    k1, k2 = engine.penetration_metrics(model)
    # flat forecast 0.7 vs ramp load mean 0.5
    assert k1 == pytest.approx(0.7 / 0.5, rel=1e-6)
    assert k2 == 0.0


def test_penetration_metrics_twelve_node_scaling():
    base, _ = engine.penetration_metrics(twelve_node(ess=False))
    doubled, _ = engine.penetration_metrics(
        twelve_node(ess=False, pv_scale=2.0))
    assert doubled == pytest.approx(2.0 * base, rel=1e-9)
    _, k2 = engine.penetration_metrics(twelve_node())
    assert k2 > 0.0


def test_penetration_metrics_errors():
    with pytest.raises(ValueError, match="K1"):
        engine.penetration_metrics(ess_symmetric())  # no loads


# -- chance margins ------------------------------------------------------------------


def test_margins_zero_at_alpha_half():
    model = dataclasses.replace(twelve_node(), alpha=0.5)
    assert engine.compute_margins(model) == ChanceMargins.zero()


def test_margins_zero_at_zero_variance():
    model = twelve_node(sigma_pv2=0.0, sigma_load2=0.0)
    assert engine.compute_margins(model) == ChanceMargins.zero()


def test_margins_monotone_in_alpha():
    tight = engine.compute_margins(twelve_node(alpha=0.01))
    loose = engine.compute_margins(twelve_node(alpha=0.1))
    for node in tight.u_node:
        assert tight.u_node[node] >= loose.u_node[node] - 1e-12


def test_deterministic_limits_reproduce_objective():
    base = engine.solve_slice(
        dataclasses.replace(twelve_node(), alpha=0.5), 0.0,
        engine.AssessmentConfig(directions=3, workers=1))
    zero_sigma = engine.solve_slice(
        twelve_node(sigma_pv2=0.0, sigma_load2=0.0), 0.0,
        engine.AssessmentConfig(directions=3, workers=1))
    assert base.objective == pytest.approx(zero_sigma.objective, abs=1e-9)


def test_monte_carlo_validation_respects_alpha():
    model = twelve_node()  # alpha = 0.1, the published sigma levels
    cfg = engine.AssessmentConfig(directions=3, workers=1)
    asm = engine.build_subproblem(model, math.pi, cfg)
    sol = engine.solve_assembled(asm, cfg)
    assert sol.status == "optimal"
    report = engine.monte_carlo_validate(asm, sol.values, n_samples=20_000,
                                         seed=1)
    assert report["n_tight"] > 0
    assert report["max_rate_tight"] <= model.alpha + 0.01


# -- coupling modes ------------------------------------------------------------------


def test_sequential_matches_joint_without_storage():
    model = three_node()
    joint = engine.solve_slice(model, 0.0, CFG1)
    seq = engine.solve_slice(
        model, 0.0, dataclasses.replace(CFG1, coupling="sequential"))
    assert seq.objective == pytest.approx(joint.objective, rel=1e-9)


def test_sequential_greedy_never_beats_joint():
    model = twelve_node()
    cfg = engine.AssessmentConfig(directions=3, workers=1)
    for theta in (0.0, math.pi / 3):
        joint = engine.solve_slice(model, theta, cfg)
        seq = engine.solve_slice(
            model, theta, dataclasses.replace(cfg, coupling="sequential"))
        assert seq.status == "optimal"
        assert seq.objective <= joint.objective + 1e-6 * abs(joint.objective)


def test_s0_continuity_flag_pins_boundaries():
    model = twelve_node()
    cfg = engine.AssessmentConfig(directions=3, workers=1,
                                  s0_continuity=True)
    s = engine.solve_slice(model, 0.0, cfg)
    for prev, nxt in zip(s.coeffs, s.coeffs[1:]):
        assert prev[-1] == pytest.approx(nxt[0], abs=1e-7)


# -- containment monotonicity ---------------------------------------------------------


def test_removing_devices_never_increases_objectives():
    cfg = engine.AssessmentConfig(directions=3, workers=1)
    base = twelve_node()
    for variant in (twelve_node(sop=False), twelve_node(ess=False)):
        for theta in (0.0, math.pi / 3, math.pi):
            full = engine.solve_slice(base, theta, cfg)
            cut = engine.solve_slice(variant, theta, cfg)
            if cut.status == "optimal" and full.status == "optimal":
                assert cut.objective <= full.objective + 1e-6


def test_scaling_capacity_never_decreases_m():
    cfg = engine.AssessmentConfig(directions=3, workers=2)
    small = engine.metric_M(engine.assess(twelve_node(), cfg))
    grown = twelve_node()
    sops = tuple(dataclasses.replace(s, s_max=s.s_max * 1.5,
                                     p_min=s.p_min * 1.5,
                                     p_max=s.p_max * 1.5)
                 for s in grown.sop_devices)
    grown = dataclasses.replace(grown, sop_devices=sops)
    big = engine.metric_M(engine.assess(grown, cfg))
    assert big >= small - 1e-6


# -- CT vs DT ---------------------------------------------------------------------------


def test_dt_equals_ct_on_piecewise_constant_inputs():
    # constant data: a constant-decision optimum exists, so both agree
    for model in (ess_symmetric(), three_node(ramping=False)):
        for theta in (0.0, math.pi / 2, math.pi):
            ct = engine.solve_slice(model, theta, CFG1)
            dt = engine.solve_slice(
                model, theta, dataclasses.replace(CFG1, mode="dt"))
            assert ct.status == dt.status
            if ct.status == "optimal":
                assert ct.objective == pytest.approx(dt.objective, abs=1e-5)
                assert dt.coeffs.shape[1] == 1


def test_ct_dominates_dt_on_constant_data():
    for model in (ess_symmetric(), three_node(ramping=False)):
        for theta in engine.all_directions(2):
            ct = engine.solve_slice(model, float(theta), CFG1)
            dt = engine.solve_slice(
                model, float(theta), dataclasses.replace(CFG1, mode="dt"))
            if dt.status == "optimal":
                assert ct.status == "optimal"
                assert ct.objective >= dt.objective - 1e-6


def test_ct_tracks_ramp_dt_stays_flat():
    model = three_node(ramping=True)
    ct = engine.solve_slice(model, 0.0, CFG1)
    dt = engine.solve_slice(model, 0.0,
                            dataclasses.replace(CFG1, mode="dt"))
    ct_traj = engine.FlexTube((ct,), 0.0, 900.0, 4).trajectory(0)
    dt_traj = engine.FlexTube((dt,), 0.0, 900.0, 4, mode="dt").trajectory(0)
    rel_gap = []
    for t in np.linspace(0.0, 3600.0, 65):
        c, d = ct_traj.evaluate(t), dt_traj.evaluate(t)
        rel_gap.append(abs(c - d) / max(abs(d), 1e-12))
    assert max(rel_gap) >= 0.01


# -- serialization -----------------------------------------------------------------------


def test_tube_csv_roundtrip(toy_tube):
    buf = io.StringIO()
    engine.tube_to_csv(toy_tube, buf)
    buf.seek(0)
    import tempfile, os
    with tempfile.NamedTemporaryFile("w", suffix=".csv",
                                     delete=False) as fp:
        fp.write(buf.getvalue())
        path = fp.name
    try:
        back = engine.tube_from_csv(path, {"t1": 0.0, "period": 900.0,
                                           "n_periods": 4})
        assert len(back.slices) == len(toy_tube.slices)
        for a, b in zip(back.slices, toy_tube.slices):
            assert a.theta == pytest.approx(b.theta)
            assert a.status == b.status
            if a.feasible:
                assert np.allclose(a.coeffs, b.coeffs)
    finally:
        os.unlink(path)


def test_dense_grid_emission(sym_tube):
    buf = io.StringIO()
    engine.dense_grid_csv(sym_tube, buf, n_theta=8, n_t=3)
    lines = buf.getvalue().strip().splitlines()
    assert lines[0] == "theta,t,p,q"
    assert len(lines) == 1 + 8 * 3


def test_assess_parallel_matches_serial():
    model = three_node()
    serial = engine.assess(model, engine.AssessmentConfig(directions=2,
                                                          workers=1))
    parallel = engine.assess(model, engine.AssessmentConfig(directions=2,
                                                            workers=2))
    for a, b in zip(serial.slices, parallel.slices):
        assert a.status == b.status
        if a.feasible:
            assert np.allclose(a.coeffs, b.coeffs, atol=1e-9)
