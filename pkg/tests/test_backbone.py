import numpy as np
import pytest

from cdeq.backbone import (
    BackboneParams,
    ReadoutHead,
    TeacherConfig,
    enforce_contractivity,
    equilibrium,
    f_forward,
    init_backbone,
    jfb_surrogate_loss,
    load_teacher,
    residual_F,
    save_teacher,
    spectral_norm,
    train_teacher,
    Teacher,
)
from cdeq import autograd as ag
from cdeq.datasets import make_dataset
from cdeq.errors import CacheError, ShapeError, ValidationError
from cdeq.numeric import make_rng
from cdeq.solver import SolverConfig


def scalar_params(activation="identity"):
    return BackboneParams(U=np.zeros((1, 1)), V=np.array([[0.5]]), b=np.array([1.0]), activation=activation)


def test_zero_map():
    p = BackboneParams(np.zeros((3, 2)), np.zeros((3, 3)), np.zeros(3), "tanh")
    np.testing.assert_array_equal(f_forward(p, np.ones(3), np.ones(2)), np.zeros(3))


def test_identity_injection_fixed_point(rng):
    p = BackboneParams(np.eye(3), np.zeros((3, 3)), np.zeros(3), "identity")
    x = rng.standard_normal(3)
    np.testing.assert_array_equal(f_forward(p, rng.standard_normal(3), x), x)
    np.testing.assert_allclose(equilibrium(p, x).final, x)


def test_scalar_affine_backbone():
    p = scalar_params()
    trace = equilibrium(p, np.zeros(1), SolverConfig(ridge=0.0, tol=1e-12))
    assert abs(trace.final[0] - 2.0) < 1e-12
    np.testing.assert_allclose(residual_F(p, np.array([1.0]), np.zeros(1)), [0.5])
    np.testing.assert_allclose(residual_F(p, np.array([2.0]), np.zeros(1)), [0.0])


def test_residual_at_zero_is_f_of_zero(rng):
    p = init_backbone(2, 5, rng)
    x = rng.standard_normal(2)
    np.testing.assert_array_equal(residual_F(p, np.zeros(5), x), f_forward(p, np.zeros(5), x))


def test_dimension_mismatch(rng):
    p = init_backbone(2, 4, rng)
    with pytest.raises(ShapeError):
        f_forward(p, np.zeros(3), np.zeros(2))
    with pytest.raises(ShapeError):
        f_forward(p, np.zeros(4), np.zeros(3))


def test_unknown_activation():
    with pytest.raises(ValidationError):
        BackboneParams(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros(1), "gelu")


def test_spectral_norm_and_rescaling(rng):
    V = rng.standard_normal((16, 16))
    assert spectral_norm(V, iters=200) == pytest.approx(np.linalg.norm(V, 2), rel=1e-6)
    W = enforce_contractivity(V, 0.9)
    assert np.linalg.norm(W, 2) <= 0.9 * (1 + 1e-3)
    small = 0.01 * np.eye(4)
    np.testing.assert_array_equal(enforce_contractivity(small, 0.9), small)


def test_contractive_backbone_lipschitz(rng):
    p = init_backbone(2, 16, rng, sigma_max=0.9)
    sigma = np.linalg.norm(p.V, 2)
    x = rng.standard_normal((1000, 2))
    z1, z2 = rng.standard_normal((1000, 16)), rng.standard_normal((1000, 16))
    lhs = np.linalg.norm(f_forward(p, z1, x) - f_forward(p, z2, x), axis=1)
    rhs = np.linalg.norm(z1 - z2, axis=1)
    assert sigma <= 0.9 * (1 + 1e-3)
    assert np.all(lhs <= sigma * rhs + 1e-12)


def test_jfb_gradient_is_exact_for_surrogate(rng):
    p = init_backbone(2, 4, rng)
    z_star = equilibrium(p, rng.standard_normal((6, 2))).final
    x = rng.standard_normal((6, 2))
    y = rng.integers(0, 2, 6)
    params = {**p.arrays(), "H": rng.standard_normal((2, 4)), "c": rng.standard_normal(2)}
    err = ag.finite_difference_check(lambda n: jfb_surrogate_loss(n, z_star, x, y), params)
    assert err < 1e-5


def test_zero_epoch_teacher_keeps_initialisation():
    data = make_dataset("two_moons", n=100, seed=0)
    teacher = train_teacher(data, cfg=TeacherConfig(d_z=8, epochs=0, seed=3))
    ref = init_backbone(2, 8, make_rng(3), 0.9)
    for name, arr in ref.arrays().items():
        np.testing.assert_array_equal(teacher.params.arrays()[name], arr)


def test_teacher_learns_separable_set():
    data = make_dataset("two_moons", n=200, noise=0.0, seed=1)
    # shift one class far away: linearly separable
    data.x[data.labels == 1] += np.array([4.0, 0.0])
    teacher = train_teacher(data, cfg=TeacherConfig(d_z=8, epochs=30, seed=0))
    assert teacher.metrics["train_accuracy"] >= 0.99


def test_teacher_regression_metrics():
    data = make_dataset("affine_regression", n=200, noise=0.05, seed=0)
    teacher = train_teacher(data, cfg=TeacherConfig(d_z=8, epochs=150, seed=0))
    # well under the target variance (about 2.5)
    assert teacher.metrics["val_mse"] < 0.1


def test_checkpoint_round_trip(tmp_path, rng):
    p = init_backbone(2, 5, rng)
    head = ReadoutHead(rng.standard_normal((3, 5)), rng.standard_normal(3))
    path = tmp_path / "t.ckpt"
    save_teacher(path, Teacher(p, head, 0.9, 11))
    back = load_teacher(path)
    for name, arr in p.arrays().items():
        assert back.params.arrays()[name].tobytes() == arr.tobytes()
    assert back.head.H.tobytes() == head.H.tobytes()
    assert back.sigma_max == 0.9 and back.seed == 11
    raw = bytearray(path.read_bytes())
    raw[-3] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CacheError):
        load_teacher(path)
