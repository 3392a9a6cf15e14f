import numpy as np
import pytest

from cdeq.backbone import fixed_point_map, init_backbone
from cdeq.errors import CacheError, NumericalError, ValidationError
from cdeq.numeric import make_rng
from cdeq.solver import SolverConfig, solve
from cdeq.trajectory import (
    AugmentConfig,
    TimeMap,
    Trajectory,
    augmentation_mask,
    read_cache,
    sample_trajectories,
    sample_trajectory,
    time_of,
    tmap_from_meta,
    aug_from_meta,
    write_cache,
)


def test_time_map_examples():
    assert time_of(0, TimeMap(0.1, 2.0, 0.3)) == 0.1
    assert time_of(1, TimeMap(0.0, 1.0, np.log(2.0))) == pytest.approx(0.5, abs=1e-15)
    assert time_of(60, TimeMap()) < 1.0


def test_time_map_strictly_increasing():
    # beyond rho*k ~ 36 the gap to T drops below float64 resolution
    t = time_of(np.arange(121), TimeMap())
    assert np.all(np.diff(t) > 0)
    assert np.all((t >= 0.0) & (t < 1.0))


def test_time_map_validation():
    with pytest.raises(ValidationError):
        TimeMap(1.0, 1.0)
    with pytest.raises(ValidationError):
        TimeMap(rho=0.0)
    with pytest.raises(ValidationError):
        time_of(-1, TimeMap())


def test_augment_config_validation():
    with pytest.raises(ValidationError):
        AugmentConfig(k_min=0).validate(20)
    with pytest.raises(ValidationError):
        AugmentConfig(k_min=19, k_tail=2).validate(20)
    with pytest.raises(ValidationError):
        AugmentConfig(p_aug=1.5).validate(20)


@pytest.fixture
def teacher_map():
    params = init_backbone(2, 6, make_rng(0))
    return fixed_point_map(params)


def test_p_aug_zero_matches_solver(teacher_map, rng):
    x = rng.standard_normal(2)
    traj = sample_trajectory(teacher_map, x, 6, 20, AugmentConfig(p_aug=0.0), rng)
    ref = solve(teacher_map, x, np.zeros(6), SolverConfig(), fixed_iterations=20)
    np.testing.assert_array_equal(traj.states, np.stack(ref.states))
    assert not traj.mask.any()


def test_p_aug_one_replaces_window(teacher_map, rng):
    traj = sample_trajectory(teacher_map, rng.standard_normal(2), 6, 20, AugmentConfig(p_aug=1.0, k_min=1, k_tail=2), rng)
    assert traj.mask[1:19].all() and not traj.mask[0] and not traj.mask[19:].any()
    for k in range(1, 19):
        np.testing.assert_array_equal(traj.states[k], traj.endpoint)


def test_augmentation_fraction_and_exclusions():
    aug = AugmentConfig(p_aug=0.1, k_min=1, k_tail=2)
    mask = augmentation_mask(20, aug, make_rng(5), n=10000)
    assert 0.09 <= mask[:, 1:19].mean() <= 0.11
    assert not mask[:, 0].any() and not mask[:, 19:].any()


def test_trajectory_times_and_shapes(teacher_map, rng):
    trajs = sample_trajectories(teacher_map, rng.standard_normal((5, 2)), 6, 10, AugmentConfig(), rng,
                                TimeMap(rho=0.5))
    for t in trajs:
        assert t.states.shape == (11, 6) and t.K == 10
        np.testing.assert_array_equal(t.times, time_of(np.arange(11), TimeMap(rho=0.5)))


def test_normal_initialisation(teacher_map, rng):
    traj = sample_trajectory(teacher_map, np.zeros(2), 6, 5, AugmentConfig(k_min=1, k_tail=1), rng, init="normal")
    assert np.linalg.norm(traj.states[0]) > 0
    with pytest.raises(ValidationError):
        sample_trajectory(teacher_map, np.zeros(2), 6, 5, AugmentConfig(k_min=1, k_tail=1), rng, init="uniform")


def test_nonfinite_state_rejected(rng):
    def bad(z, x):
        return np.full_like(z, np.nan)

    with pytest.raises(NumericalError):
        sample_trajectory(bad, np.zeros(2), 3, 5, AugmentConfig(k_min=1, k_tail=1), rng)


def test_cache_round_trip(tmp_path, teacher_map, rng):
    tmap, aug = TimeMap(rho=0.3), AugmentConfig(p_aug=0.5)
    trajs = sample_trajectories(teacher_map, rng.standard_normal((7, 2)), 6, 12, aug, rng, tmap)
    path = tmp_path / "c.cache"
    write_cache(trajs, path, tmap=tmap, aug=aug, seed=3)
    back, meta = read_cache(path, with_meta=True)
    assert len(back) == 7 and all(a.equals(b) for a, b in zip(trajs, back))
    assert tmap_from_meta(meta) == tmap and aug_from_meta(meta) == aug and meta["seed"] == 3


def test_empty_cache(tmp_path):
    path = tmp_path / "empty.cache"
    write_cache([], path)
    assert read_cache(path) == []


def test_corrupted_cache_rejected(tmp_path, teacher_map, rng):
    trajs = sample_trajectories(teacher_map, rng.standard_normal((3, 2)), 6, 5, AugmentConfig(k_min=1, k_tail=1), rng)
    path = tmp_path / "c.cache"
    write_cache(trajs, path)
    raw = bytearray(path.read_bytes())
    raw[-10] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(CacheError):
        read_cache(path)


def test_cache_rejects_wrong_kind_and_version(tmp_path, rng):
    from cdeq.blobio import write_artifact
    path = tmp_path / "x.bin"
    write_artifact(path, "teacher", {}, b"")
    with pytest.raises(CacheError):
        read_cache(path)
    path.write_bytes(path.read_bytes().replace(b'"version": 1', b'"version": 9'))
    with pytest.raises(CacheError):
        read_cache(path)


def test_missing_cache(tmp_path):
    with pytest.raises(ValidationError):
        read_cache(tmp_path / "nope.cache")


def test_mixed_dimensions_rejected(tmp_path):
    a = Trajectory(np.zeros(2), np.zeros((3, 4)), np.arange(3.0), np.zeros(3, bool))
    b = Trajectory(np.zeros(2), np.zeros((4, 4)), np.arange(4.0), np.zeros(4, bool))
    with pytest.raises(ValidationError):
        write_cache([a, b], tmp_path / "m.cache")
