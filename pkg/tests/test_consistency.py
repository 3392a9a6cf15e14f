import numpy as np
import pytest

from cdeq import autograd as ag
from cdeq import consistency as cons
from cdeq.backbone import BackboneParams, f_forward, init_backbone
from cdeq.consistency import (
    BoundaryCoeffs,
    InferenceSchedule,
    StudentParams,
    g_phi,
    h_graph,
    h_phi,
    infer,
    init_student,
    load_student,
    p_phi_aa,
    p_phi_one_step,
    save_student,
)
from cdeq.errors import ShapeError, ValidationError
from cdeq.solver import SolverConfig, anderson_step
from cdeq.trajectory import TimeMap


def scalar_student(V=0.5, U=0.0, b=1.0, d_t=1):
    bb = BackboneParams(np.array([[U]]), np.array([[V]]), np.array([b]), "identity")
    return StudentParams(bb, np.concatenate([[[1.0]], np.zeros((1, d_t))], axis=1), d_t)


def test_boundary_identities(rng):
    for _ in range(1000):
        gamma = rng.uniform(1.0, 5.0)
        c = BoundaryCoeffs(gamma, 0.0, 1.0)
        t = rng.uniform(0.0, 1.0)
        assert c.c_skip(t) + c.c_out(t) == 1.0
    c = BoundaryCoeffs(2.0, 0.1, 1.0)
    assert c.c_skip(0.1) == 0.0 and c.c_skip(1.0) == 1.0
    t = np.linspace(0.1, 1.0, 50)
    assert np.all(np.diff(c.c_skip(t)) > 0)


def test_boundary_validation():
    with pytest.raises(ValidationError):
        BoundaryCoeffs(gamma=0.5)
    with pytest.raises(ValidationError):
        BoundaryCoeffs().c_skip(1.5)


def test_schedule_times():
    np.testing.assert_allclose(InferenceSchedule(2, 0.5).times(), [0.0, 0.5, 0.75])
    t = InferenceSchedule(30, 0.5, 0.2, 3.0).times()
    assert np.all(np.diff(t) > 0) and t[0] == 0.2 and t[-1] < 3.0
    with pytest.raises(ValidationError):
        InferenceSchedule(0)
    with pytest.raises(ValidationError):
        InferenceSchedule(2, beta=1.0)


def test_h_phi_identity_head_is_backbone(rng):
    p = init_student(init_backbone(2, 5, rng), d_t=3, noise=0.0)
    z, x = rng.standard_normal((4, 5)), rng.standard_normal((4, 2))
    np.testing.assert_array_equal(h_phi(p, z, 0.7, x), f_forward(p.backbone, z, x))
    np.testing.assert_array_equal(p_phi_one_step(p, z, 0.7, x), h_phi(p, z, 0.7, x))


def test_h_phi_isolates_time_channels(rng):
    bb = BackboneParams(np.zeros((3, 2)), np.zeros((3, 3)), np.zeros(3), "tanh")
    col = np.array([1.0, -2.0, 0.5])
    W = np.zeros((3, 5))
    W[:, 3] = col
    p = StudentParams(bb, W, d_t=2)
    np.testing.assert_allclose(h_phi(p, rng.standard_normal(3), 0.3, rng.standard_normal(2)), 0.3 * col)


def test_h_phi_per_row_times(rng):
    p = StudentParams(init_backbone(2, 3, rng), rng.standard_normal((3, 5)), d_t=2)
    z, x, t = rng.standard_normal((4, 3)), rng.standard_normal((4, 2)), rng.uniform(0, 1, 4)
    batched = h_phi(p, z, t, x)
    for i in range(4):
        np.testing.assert_allclose(batched[i], h_phi(p, z[i], t[i], x[i]), atol=1e-15)


def test_h_graph_gradient(rng):
    bb = init_backbone(3, 4, rng)
    params = {**bb.arrays(), "W": rng.standard_normal((4, 6))}
    z, x, w = rng.standard_normal((5, 4)), rng.standard_normal((5, 3)), rng.standard_normal((5, 4))

    def fn(n):
        return ag.sum(ag.mul(h_graph(n, ag.const(z), 0.4, ag.const(x), d_t=2), w))

    assert ag.finite_difference_check(fn, params) < 1e-5


def test_student_shape_check(rng):
    with pytest.raises(ShapeError):
        StudentParams(init_backbone(2, 4, rng), np.zeros((4, 4)), d_t=4)


def test_p_phi_aa_identical_states_is_damped_step():
    p = scalar_student()
    z = np.array([0.3])
    out = p_phi_aa(p, z, z, 0.5, 0.25, np.zeros(1), beta_aa=0.6)
    np.testing.assert_allclose(out.value, 0.6 * h_phi(p, z, 0.5, np.zeros(1)) + 0.4 * z, atol=1e-15)


def test_p_phi_aa_scalar_affine_reaches_fixed_point():
    p = scalar_student()
    out = p_phi_aa(p, np.array([1.0]), np.array([0.0]), 0.5, 0.0, np.zeros(1), ridge=0.0)
    assert abs(out.value[0] - 2.0) < 1e-12
    np.testing.assert_allclose(out.alpha, [-1.0, 2.0], atol=1e-12)


def test_p_phi_aa_exact_column():
    p = scalar_student()
    out = p_phi_aa(p, np.array([2.0]), np.array([0.0]), 0.5, 0.0, np.zeros(1), ridge=0.0)
    np.testing.assert_allclose(out.alpha, [0.0, 1.0], atol=1e-15)
    assert out.value[0] == 2.0


def test_p_phi_aa_fallback_uses_one_step():
    # zero residual in both columns with ridge 0: weight solve fails
    bb = BackboneParams(np.zeros((1, 1)), np.array([[1.0]]), np.zeros(1), "identity")
    p = StudentParams(bb, np.array([[1.0, 0.0]]), d_t=1)
    out = p_phi_aa(p, np.array([3.0]), np.array([1.0]), 0.5, 0.2, np.zeros(1), ridge=0.0)
    assert out.fallback.all()
    np.testing.assert_array_equal(out.value, h_phi(p, np.array([3.0]), 0.5, np.zeros(1)))


def test_structural_prior_equivalence(rng):
    theta = init_backbone(2, 16, rng)
    student = init_student(theta, d_t=4, noise=0.0)
    cfg = SolverConfig(m=1)
    for _ in range(100):
        x = rng.standard_normal(2)
        z_prev, z_t = rng.standard_normal(16), rng.standard_normal(16)
        t_prev, t = sorted(rng.uniform(0, 1, 2))
        ours = p_phi_aa(student, z_t, z_prev, t, t_prev, x).value
        ref = anderson_step([z_prev, z_t], [f_forward(theta, z_prev, x), f_forward(theta, z_t, x)], cfg).z
        assert ours.tobytes() == ref.tobytes()


def test_g_phi_examples():
    c = BoundaryCoeffs(1.0, 0.0, 1.0)
    np.testing.assert_array_equal(g_phi(c, np.array([4.0]), np.array([2.0]), 0.5), [3.0])
    np.testing.assert_array_equal(g_phi(c, np.array([4.0]), np.array([2.0]), 0.0), [4.0])
    near = g_phi(c, np.array([4.0]), np.array([2.0]), 1.0 - 1e-12)
    assert abs(near[0] - 2.0) < 1e-11
    with pytest.raises(ValidationError):
        g_phi(c, np.array([4.0]), np.array([2.0]), 1.0)


def test_g_phi_convex_combination(rng):
    c = BoundaryCoeffs(2.0)
    z, P = rng.standard_normal((10, 3)), rng.standard_normal((10, 3))
    t = rng.uniform(0, 1, 10)
    out = g_phi(c, P, z, t)
    lo, hi = np.minimum(z, P), np.maximum(z, P)
    assert np.all(out >= lo - 1e-15) and np.all(out <= hi + 1e-15)


def test_infer_single_step_is_head(rng):
    p = init_student(init_backbone(2, 4, rng), noise=1e-2, rng=rng)
    x = rng.standard_normal((3, 2))
    res = infer(p, BoundaryCoeffs(), x, np.zeros((3, 4)), InferenceSchedule(1))
    np.testing.assert_array_equal(res.z, h_phi(p, np.zeros((3, 4)), 0.0, x))
    assert res.nfe == 1 and len(res.states) == 2


@pytest.mark.parametrize("J", [1, 2, 3, 7])
def test_infer_calls_head_exactly_J_times(monkeypatch, rng, J):
    p = init_student(init_backbone(2, 4, rng))
    calls = []
    real = cons.h_phi
    monkeypatch.setattr(cons, "h_phi", lambda *a, **k: calls.append(1) or real(*a, **k))
    res = infer(p, BoundaryCoeffs(), rng.standard_normal((5, 2)), np.zeros((5, 4)), InferenceSchedule(J))
    assert len(calls) == J == res.nfe
    np.testing.assert_array_equal(res.times, InferenceSchedule(J).times())


def test_infer_consistent_scalar_student_two_steps():
    # consistent student on z* = 2x: the head returns the equilibrium from anywhere
    bb = BackboneParams(np.array([[2.0]]), np.zeros((1, 1)), np.zeros(1), "identity")
    p = StudentParams(bb, np.array([[1.0, 0.0]]), d_t=1)
    x = np.array([[0.5], [1.0], [1.7]])
    res = infer(p, BoundaryCoeffs(), x, np.zeros((3, 1)), InferenceSchedule(2))
    np.testing.assert_allclose(res.z, 2 * x, atol=1e-3)


def test_infer_schedule_mismatch(rng):
    p = init_student(init_backbone(2, 4, rng))
    with pytest.raises(ValidationError):
        infer(p, BoundaryCoeffs(T=2.0), np.zeros(2), np.zeros(4), InferenceSchedule(2))


def test_student_checkpoint_round_trip(tmp_path, rng):
    p = init_student(init_backbone(2, 4, rng), d_t=3, noise=1e-2, rng=rng)
    path = tmp_path / "s.ckpt"
    save_student(path, p, BoundaryCoeffs(2.0, 0.0, 1.0), TimeMap(rho=0.3), extra={"beta_sched": 0.4})
    back, coeffs, tmap, meta = load_student(path)
    for k, v in p.arrays().items():
        assert back.arrays()[k].tobytes() == v.tobytes()
    assert coeffs == BoundaryCoeffs(2.0) and tmap == TimeMap(rho=0.3) and meta["extra"]["beta_sched"] == 0.4
