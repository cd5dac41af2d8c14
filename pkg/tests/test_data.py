import numpy as np
import pytest

from lowprec.data import SyntheticTask, synthetic_task
from lowprec.model import ModelConfig, forward
from lowprec.train import OptimizerSettings, TrainConfig, run_training


def test_same_seed_and_iteration_give_same_batch():
    for kind in ("synthetic_classify", "synthetic_regress"):
        a = synthetic_task(kind, 4, seed=3, iteration=7)
        b = synthetic_task(kind, 4, seed=3, iteration=7)
        c = synthetic_task(kind, 4, seed=3, iteration=8)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])
        assert not np.array_equal(a[0], c[0])


def test_shapes_and_dtypes():
    x, y = synthetic_task("synthetic_classify", 5, seed=0, seq_len=3, input_dim=7, num_classes=4)
    assert x.shape == (5, 3, 7) and x.dtype == np.float32
    assert y.shape == (5,) and y.max() < 4
    x, y = synthetic_task("synthetic_regress", 5, seed=0, num_classes=2)
    assert y.shape == (5, 2)


def test_zero_teacher_gives_zero_targets():
    _, y = synthetic_task("synthetic_regress", 6, seed=1, teacher_scale=0.0)
    np.testing.assert_array_equal(y, 0)


def test_zero_noise_inputs_are_the_centers():
    task = SyntheticTask("synthetic_classify", seed=2, noise=0.0)
    x, y = task.batch(1, 8)
    np.testing.assert_array_equal(x, task.centers[y].astype(np.float32))


def test_starvation_zeroes_trailing_channels():
    task = SyntheticTask("synthetic_classify", seed=0, input_dim=8, starve_until=10, starve_fraction=0.25)
    x, _ = task.batch(9, 4)
    np.testing.assert_array_equal(x[..., 6:], 0)
    assert np.all(x[..., :6] != 0)
    x, _ = task.batch(10, 4)
    assert np.all(x[..., 6:] != 0)


def test_unknown_task():
    with pytest.raises(ValueError):
        synthetic_task("images", 1, seed=0)


def test_zero_noise_clusters_are_learned():
    cfg = ModelConfig(depth=1, dim=32, heads=2)
    tc = TrainConfig(iterations=150, warmup_iterations=10, batch_size=32, seed=0, task_noise=0.0,
                     optimizer=OptimizerSettings(lr=3e-3))
    result = run_training(cfg, tc)
    task = tc.make_task()
    x, y = task.batch(10_000, 512)
    logits, _ = forward(result.params, x, cfg)
    assert np.mean(np.argmax(logits, axis=1) == y) >= 0.99
