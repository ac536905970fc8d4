import math

import numpy as np
import pytest
import torch
from PIL import Image
from pydantic import ValidationError

from keystego.backbone import MaskedBackbone
from keystego.evaluation import (
    _scatter_ratio,
    cross_key_matrix,
    evaluate,
    mae,
    pca_entanglement,
    plot_cross_key_matrix,
    plot_pca,
    psnr,
    purification_report,
    qualitative_grid,
    random_key_probe,
    residual,
    ssim,
    unregistered_keys,
)
from keystego.keyed_weights import KeyRegistry
from keystego.models import CrossKeyMatrix, MetricTriple
from keystego.training import add_gaussian_noise

from .conftest import random_images


# ============================================
# Metric oracles
# ============================================
def loop_psnr(a: np.ndarray, b: np.ndarray) -> float:
    diffs = [(x - y) ** 2 for x, y in zip(a.ravel().tolist(), b.ravel().tolist())]
    return 10.0 * math.log10(1.0 / (sum(diffs) / len(diffs)))


def loop_ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Gaussian-window SSIM over every fully-contained 11x11 window of every channel."""
    g = np.array([math.exp(-((i - 5) ** 2) / (2 * 1.5**2)) for i in range(11)])
    w = np.outer(g, g) / np.outer(g, g).sum()
    c1, c2 = 0.01**2, 0.03**2
    scores = []
    for ch in range(a.shape[0]):
        for i in range(a.shape[1] - 10):
            for j in range(a.shape[2] - 10):
                x, y = a[ch, i:i + 11, j:j + 11], b[ch, i:i + 11, j:j + 11]
                mx, my = (w * x).sum(), (w * y).sum()
                vx, vy = (w * x * x).sum() - mx * mx, (w * y * y).sum() - my * my
                cxy = (w * x * y).sum() - mx * my
                scores.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return sum(scores) / len(scores)


def test_metrics_match_loop_oracles():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = rng.uniform(0, 1, size=(3, 20, 20))
        b = np.clip(a + rng.normal(0, rng.uniform(0.01, 0.3), size=a.shape), 0, 1)
        ta, tb = torch.from_numpy(a), torch.from_numpy(b)
        assert psnr(ta, tb) == pytest.approx(loop_psnr(a, b), abs=1e-9)
        assert ssim(ta, tb) == pytest.approx(loop_ssim(a, b), abs=1e-9)
        assert mae(ta, tb) == pytest.approx(sum(abs(x - y) for x, y in zip(a.ravel(), b.ravel())) / a.size, abs=1e-12)


def test_closed_form_metric_cases():
    a = torch.rand(3, 32, 32, dtype=torch.float64)
    assert psnr(a, a) == 100.0
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert mae(a, a) == 0.0

    flat = torch.full((3, 32, 32), 0.3, dtype=torch.float64)
    assert ssim(flat, flat) == pytest.approx(1.0, abs=1e-12)
    assert psnr(flat, flat + 0.1) == pytest.approx(20.0, abs=1e-9)
    assert mae(flat, flat + 0.1) == pytest.approx(0.1, abs=1e-12)


def test_psnr_is_capped_for_tiny_errors():
    a = torch.zeros(3, 16, 16, dtype=torch.float64)
    assert psnr(a, a + 1e-6) == 100.0


def test_metrics_reject_shape_mismatch_and_tiny_images():
    with pytest.raises(ValueError):
        psnr(torch.zeros(3, 8, 8), torch.zeros(3, 8, 9))
    with pytest.raises(ValueError):
        ssim(torch.zeros(3, 8, 8), torch.zeros(3, 8, 8))


def test_batched_ssim_is_mean_of_planes():
    a, b = random_images(2, 16, seed=1), random_images(2, 16, seed=2)
    assert ssim(a, b) == pytest.approx((ssim(a[0], b[0]) + ssim(a[1], b[1])) / 2, abs=1e-12)


# ============================================
# Reports
# ============================================
def make_cells(grid):
    return [[MetricTriple(psnr=v, ssim=0.5, mae=0.1) for v in row] for row in grid]


def test_cross_key_matrix_summaries():
    matrix = CrossKeyMatrix(cells=make_cells([[30, 10], [12, 28]]), sample_count=4)
    assert matrix.size == 2
    assert matrix.diagonal_margin_db() == 16
    assert matrix.rows_diagonal_dominant()
    assert not CrossKeyMatrix(cells=make_cells([[30, 31], [12, 28]]), sample_count=4).rows_diagonal_dominant()
    assert CrossKeyMatrix(cells=make_cells([[30]]), sample_count=1).diagonal_margin_db() is None
    with pytest.raises(ValidationError):
        CrossKeyMatrix(cells=make_cells([[1, 2]]), sample_count=1)


def test_metric_triple_mean():
    mean = MetricTriple.mean([MetricTriple(psnr=10, ssim=0.2, mae=0.1), MetricTriple(psnr=20, ssim=0.4, mae=0.3)])
    assert (mean.psnr, mean.ssim, mean.mae) == pytest.approx((15, 0.3, 0.2))


# ============================================
# Protocols on an untrained model
# ============================================
@pytest.fixture
def model(tiny_backbone):
    return MaskedBackbone(tiny_backbone, 0.7, mask_seed=2)


def test_evaluate_report_structure(model, registry):
    secrets, covers = random_images(3, 16, seed=1), random_images(3, 16, seed=2)
    report = evaluate(model, secrets, covers, registry, batch_size=2, config={"run": "x"})
    assert report.sample_count == 3
    assert [k.key_index for k in report.per_key] == [1, 2, 3]
    assert report.cross_decoding is not None
    assert 0.0 <= report.cover_regression_rate <= 1.0
    assert report.config == {"run": "x"}

    matrix = cross_key_matrix(model, secrets, covers, registry)
    assert matrix.size == 3
    for key in report.per_key:
        cell = matrix.cells[key.key_index - 1][key.key_index - 1]
        assert cell.psnr == pytest.approx(key.recoverability.psnr)


def test_evaluate_with_one_key_has_no_cross_decoding(model):
    secrets, covers = random_images(2, 16, seed=1), random_images(2, 16, seed=2)
    report = evaluate(model, secrets, covers, KeyRegistry.random(1, seed=0))
    assert report.cross_decoding is None
    assert report.cover_regression_rate is None


def test_purification_report_gain(model):
    clean = random_images(2, 16)
    noisy = add_gaussian_noise(clean, 0.05, seed=0)
    report = purification_report(model, clean, noisy, sigma=0.05)
    assert report.gain_db == pytest.approx(report.purified_vs_clean.psnr - report.noisy_vs_clean.psnr)
    assert report.sample_count == 2


def test_unregistered_keys_avoid_the_registry(registry):
    keys = unregistered_keys(registry, 20, seed=3)
    assert len(set(keys)) == 20
    assert not any(registry.contains(k) for k in keys)
    assert keys == unregistered_keys(registry, 20, seed=3)


def test_random_keys_report_and_grid(model, registry, tmp_path):
    secrets, covers = random_images(2, 16, seed=1), random_images(2, 16, seed=2)
    report = random_key_probe(model, secrets, covers, registry, n_random=2, seed=0,
                              grid_path=tmp_path / "random_keys.png")
    assert report.n_random == 2
    assert report.sample_count == 2 * len(registry)
    assert report.mismatched_vs_secret is not None
    assert report.max_ssim_vs_secret >= report.vs_secret.ssim
    assert (tmp_path / "random_keys.png").is_file()


def test_qualitative_grid_layout(model, registry, tmp_path):
    secrets, covers = random_images(3, 16, seed=1), random_images(3, 16, seed=2)
    path = qualitative_grid(model, secrets, covers, registry, tmp_path / "grid.png", rows=2)
    with Image.open(path) as img:
        assert img.size == (8 * 18 + 2, 14 + 2 * 18 + 2)


def test_pca_entanglement_shapes(model, registry, tmp_path):
    secrets, covers = random_images(4, 16, seed=1), random_images(4, 16, seed=2)
    result = pca_entanglement(model, secrets, covers, registry, n_samples=3)
    assert len(result.conditions) == len(registry) ** 2
    assert all(len(c.points) == 3 for c in result.conditions)
    assert sum(c.matched for c in result.conditions) == len(registry)
    assert len(result.explained_variance_ratio) == 2
    assert plot_pca(result, tmp_path / "pca.png").is_file()


def test_scatter_ratio_rewards_separated_groups():
    rng = np.random.default_rng(0)
    tight = np.concatenate([rng.normal(0, 0.1, (20, 2)), rng.normal(5, 0.1, (20, 2))])
    mixed = rng.normal(0, 1, (40, 2))
    labels = np.repeat([0, 1], 20)
    assert _scatter_ratio(tight, labels) > 100 * _scatter_ratio(mixed, labels)


def test_cross_key_heatmap_is_written(tmp_path):
    matrix = CrossKeyMatrix(cells=make_cells([[30, 10], [12, 28]]), sample_count=4)
    assert plot_cross_key_matrix(matrix, tmp_path / "m.png", title="K=2").is_file()


def test_residual_is_amplified_and_clamped():
    a = torch.zeros(3, 4, 4)
    b = torch.full((3, 4, 4), 0.1)
    assert torch.allclose(residual(a, b), torch.full((3, 4, 4), 0.5))
    assert float(residual(a, b + 0.5).max()) == 1.0
