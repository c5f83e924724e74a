import numpy as np
import pytest

from acereloc.losses import CurriculumConfig

from .gradsuite import backbone_check, head_check, sample_loss_pipeline_check


@pytest.mark.parametrize("valid", [True, False])
def test_sample_loss_pipeline_gradients(valid):
    rng = np.random.default_rng(11 if valid else 12)
    for _ in range(50):
        worst, checked, _ = sample_loss_pipeline_check(rng, valid)
        assert worst < 1e-4 and checked == 4


def test_dsacstar_pipeline_gradients():
    rng = np.random.default_rng(13)
    for _ in range(20):
        worst, _, _ = sample_loss_pipeline_check(rng, True, CurriculumConfig(loss="dsacstar"))
        assert worst < 1e-4


@pytest.mark.parametrize("homogeneous", [True, False])
def test_random_heads_f64(homogeneous):
    rng = np.random.default_rng(14)
    for _ in range(10):
        worst, checked, skipped = head_check(rng, homogeneous)
        assert worst < 1e-4 and checked > skipped


def test_random_heads_f32():
    rng = np.random.default_rng(15)
    for i in range(10):
        worst, _, _ = head_check(rng, i % 2 == 0, dtype=np.float32, eps=1e-2)
        assert worst < 1e-2


def test_backbone_layers():
    rng = np.random.default_rng(16)
    worst, checked, _ = backbone_check(rng)
    assert worst < 1e-4 and checked >= 30
