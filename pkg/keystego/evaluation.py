"""
Image quality metrics and the evaluation protocols.

Metric conventions (images in [0, 1], float64 arithmetic):
  - PSNR = 10*log10(1/MSE), reported as 100 dB when MSE < 1e-10
  - SSIM: single scale, 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03,
    data range 1, averaged over channels and all fully-contained windows
    (skimage.metrics with population covariance)
  - MAE = mean absolute difference
Batched inputs (N, 3, H, W) are scored per image; report fields are means
over images (and over keys / key pairs where applicable).
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import matplotlib.pyplot as plt
import numpy as np
import torch
from PIL import Image, ImageDraw
from skimage.metrics import peak_signal_noise_ratio, structural_similarity
from sklearn.decomposition import PCA

from keystego.backbone import (
    MaskedBackbone,
    TaskMode,
    extract_recovery_features,
    run_task,
    run_with_fill,
)
from keystego.config import settings
from keystego.keyed_weights import U64_LIMIT, KeyRegistry, generate_key_weights
from keystego.models import (
    CrossKeyMatrix,
    EvalReport,
    KeyBreakdown,
    MetricTriple,
    PcaCondition,
    PcaResult,
    ProbeReport,
    PurificationReport,
)

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


# ============================================
# Metrics
# ============================================
def _check_pair(a: torch.Tensor, b: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    if a.shape != b.shape:
        raise ValueError(f"Metric inputs differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a.detach().double().cpu(), b.detach().double().cpu()


def mse(a: torch.Tensor, b: torch.Tensor) -> float:
    a, b = _check_pair(a, b)
    return float(((a - b) ** 2).mean())


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """Peak signal-to-noise ratio in dB with peak 1.0."""
    a, b = _check_pair(a, b)
    if mse(a, b) < settings.PSNR_CAP_MSE:
        return settings.PSNR_CAP_DB
    return float(peak_signal_noise_ratio(a.numpy(), b.numpy(), data_range=1.0))


def mae(a: torch.Tensor, b: torch.Tensor) -> float:
    a, b = _check_pair(a, b)
    return float((a - b).abs().mean())


def ssim(a: torch.Tensor, b: torch.Tensor) -> float:
    """Mean SSIM of one (C, H, W) plane pair, or the mean over an (N, C, H, W) batch."""
    a, b = _check_pair(a, b)
    if a.ndim == 3:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    if a.shape[-1] < SSIM_WINDOW or a.shape[-2] < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    scores = [
        structural_similarity(
            x.numpy(), y.numpy(), data_range=1.0, channel_axis=0,
            gaussian_weights=True, sigma=SSIM_SIGMA, use_sample_covariance=False,
            K1=SSIM_K1, K2=SSIM_K2,
        )
        for x, y in zip(a, b)
    ]
    return float(np.mean(scores))


def metric_triple(a: torch.Tensor, b: torch.Tensor) -> MetricTriple:
    return MetricTriple(psnr=psnr(a, b), ssim=ssim(a, b), mae=mae(a, b))


def batch_triples(a: torch.Tensor, b: torch.Tensor) -> List[MetricTriple]:
    """Per-image metrics for (N, 3, H, W) batches (or a single plane)."""
    if a.ndim == 3:
        return [metric_triple(a, b)]
    return [metric_triple(x, y) for x, y in zip(a, b)]


# ============================================
# Stego protocols
# ============================================
def _batches(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield slice(start, min(n, start + batch_size))


@dataclass
class _Grid:
    """Per-image triples: imperceptibility per key, and recovery for every (encode, decode) pair."""

    imperceptibility: Dict[int, List[MetricTriple]]
    recovery: Dict[Tuple[int, int], List[MetricTriple]]
    cover_closer: int
    mismatched_total: int


def _run_grid(
    model: MaskedBackbone,
    secrets: torch.Tensor,
    covers: torch.Tensor,
    registry: KeyRegistry,
    batch_size: int,
) -> _Grid:
    if secrets.shape != covers.shape or secrets.ndim != 4 or secrets.shape[0] == 0:
        raise ValueError("Evaluation needs equally shaped, non-empty (N, 3, H, W) secret and cover batches")
    model.eval()
    imperc: Dict[int, List[MetricTriple]] = {i: [] for i in registry.indices}
    recovery: Dict[Tuple[int, int], List[MetricTriple]] = {
        (i, j): [] for i in registry.indices for j in registry.indices
    }
    cover_closer = 0
    mismatched_total = 0
    for sl in _batches(secrets.shape[0], batch_size):
        secret, cover = secrets[sl], covers[sl]
        for i in registry.indices:
            stego = run_task(model, registry, TaskMode.embed(i), [secret, cover]).cpu()
            imperc[i].extend(batch_triples(cover, stego))
            for j in registry.indices:
                out = run_task(model, registry, TaskMode.recover(j), [stego]).cpu()
                recovery[(i, j)].extend(batch_triples(secret, out))
                if j != i:
                    for o, s, c in zip(out, secret, cover):
                        mismatched_total += 1
                        if mae(o, c) < mae(o, s):
                            cover_closer += 1
    return _Grid(imperc, recovery, cover_closer, mismatched_total)


def evaluate(
    model: MaskedBackbone,
    secrets: torch.Tensor,
    covers: torch.Tensor,
    registry: KeyRegistry,
    batch_size: int = 16,
    config: Optional[dict] = None,
) -> EvalReport:
    """
    Three metric families over all test pairs and keys:
    imperceptibility (cover vs stego), recoverability (secret vs matched
    recovery) and cross decoding (secret vs recovery under every j != i).
    """
    grid = _run_grid(model, secrets, covers, registry, batch_size)
    per_key = []
    for i in registry.indices:
        cross = [t for j in registry.indices if j != i for t in grid.recovery[(i, j)]]
        per_key.append(KeyBreakdown(
            key_index=i,
            imperceptibility=MetricTriple.mean(grid.imperceptibility[i]),
            recoverability=MetricTriple.mean(grid.recovery[(i, i)]),
            cross_decoding=MetricTriple.mean(cross) if cross else None,
        ))
    all_cross = [t for (i, j), ts in grid.recovery.items() if i != j for t in ts]
    return EvalReport(
        imperceptibility=MetricTriple.mean([t for ts in grid.imperceptibility.values() for t in ts]),
        recoverability=MetricTriple.mean([t for i in registry.indices for t in grid.recovery[(i, i)]]),
        cross_decoding=MetricTriple.mean(all_cross) if all_cross else None,
        per_key=per_key,
        sample_count=secrets.shape[0],
        cover_regression_rate=(grid.cover_closer / grid.mismatched_total) if grid.mismatched_total else None,
        config=config,
    )


def cross_key_matrix(
    model: MaskedBackbone,
    secrets: torch.Tensor,
    covers: torch.Tensor,
    registry: KeyRegistry,
    batch_size: int = 16,
    config: Optional[dict] = None,
) -> CrossKeyMatrix:
    """Cell (i, j): mean metrics of Recover(j)(Embed(i)(secret, cover)) against the secret."""
    grid = _run_grid(model, secrets, covers, registry, batch_size)
    cells = [
        [MetricTriple.mean(grid.recovery[(i, j)]) for j in registry.indices]
        for i in registry.indices
    ]
    return CrossKeyMatrix(cells=cells, sample_count=secrets.shape[0], config=config)


def purification_report(
    model: MaskedBackbone,
    clean: torch.Tensor,
    noisy: torch.Tensor,
    sigma: float,
) -> PurificationReport:
    """Noisy-vs-clean and purified-vs-clean metrics; gain is the PSNR improvement."""
    purified = run_task(model, None, TaskMode.purify(), [noisy]).cpu()
    before = MetricTriple.mean(batch_triples(clean, noisy))
    after = MetricTriple.mean(batch_triples(clean, purified))
    return PurificationReport(
        sigma=sigma,
        noisy_vs_clean=before,
        purified_vs_clean=after,
        gain_db=after.psnr - before.psnr,
        sample_count=clean.shape[0] if clean.ndim == 4 else 1,
    )


def unregistered_keys(registry: KeyRegistry, n: int, seed: int) -> List[int]:
    """`n` distinct keys drawn uniformly from the 64-bit space, excluding registered ones."""
    rng = np.random.default_rng(seed)
    keys: List[int] = []
    while len(keys) < n:
        k = int(rng.integers(0, U64_LIMIT, dtype=np.uint64))
        if not registry.contains(k) and k not in keys:
            keys.append(k)
    return keys


def random_key_probe(
    model: MaskedBackbone,
    secrets: torch.Tensor,
    covers: torch.Tensor,
    registry: KeyRegistry,
    n_random: int,
    seed: int,
    grid_path: Optional[Path] = None,
    grid_rows: int = 4,
    config: Optional[dict] = None,
) -> ProbeReport:
    """
    Decode every stego with `n_random` unregistered keys and report leakage
    against the secret and the cover, next to the mismatched-registered level.
    """
    if n_random < 1:
        raise ValueError("n_random must be >= 1")
    model.eval()
    keys = unregistered_keys(registry, n_random, seed)
    vs_secret: List[MetricTriple] = []
    vs_cover: List[MetricTriple] = []
    mismatched: List[MetricTriple] = []
    rows: List[List[torch.Tensor]] = []

    for i in registry.indices:
        stego = run_task(model, registry, TaskMode.embed(i), [secrets, covers]).cpu()
        matched = run_task(model, registry, TaskMode.recover(i), [stego]).cpu()
        others = [j for j in registry.indices if j != i]
        wrong = None
        for j in others:
            out = run_task(model, registry, TaskMode.recover(j), [stego]).cpu()
            mismatched.extend(batch_triples(secrets, out))
            wrong = out if wrong is None else wrong
        first_random = None
        for k in keys:
            out = run_with_fill(model, generate_key_weights(k, model.manifest), TaskMode.recover(1), [stego]).cpu()
            vs_secret.extend(batch_triples(secrets, out))
            vs_cover.extend(batch_triples(covers, out))
            first_random = out if first_random is None else first_random
        for n in range(min(grid_rows - len(rows), secrets.shape[0])):
            rows.append([
                covers[n], stego[n], secrets[n], matched[n],
                wrong[n] if wrong is not None else torch.zeros_like(stego[n]),
                first_random[n],
                residual(covers[n], stego[n]),
                residual(secrets[n], matched[n]),
            ])

    path = None
    if grid_path is not None and rows:
        path = str(write_sample_grid(rows, _grid_labels(), grid_path))

    return ProbeReport(
        n_random=n_random,
        sample_count=secrets.shape[0] * len(registry),
        vs_secret=MetricTriple.mean(vs_secret),
        vs_cover=MetricTriple.mean(vs_cover),
        mismatched_vs_secret=MetricTriple.mean(mismatched) if mismatched else None,
        max_ssim_vs_secret=max(t.ssim for t in vs_secret),
        grid_path=path,
        config=config,
    )


def qualitative_grid(
    model: MaskedBackbone,
    secrets: torch.Tensor,
    covers: torch.Tensor,
    registry: KeyRegistry,
    path: Path,
    rows: int = 4,
    seed: int = 0,
) -> Path:
    """One row per sample: cover, stego, secret, matched, mismatched and random-key recoveries, residuals."""
    n = min(rows, secrets.shape[0])
    secrets, covers = secrets[:n], covers[:n]
    random_fill = generate_key_weights(unregistered_keys(registry, 1, seed)[0], model.manifest)
    tiles = []
    for r in range(n):
        i = registry.indices[r % len(registry)]
        j = registry.indices[(r + 1) % len(registry)]
        stego = run_task(model, registry, TaskMode.embed(i), [secrets[r], covers[r]]).cpu()
        matched = run_task(model, registry, TaskMode.recover(i), [stego]).cpu()
        wrong = run_task(model, registry, TaskMode.recover(j), [stego]).cpu() if j != i else torch.zeros_like(stego)
        rand = run_with_fill(model, random_fill, TaskMode.recover(1), [stego]).cpu()
        tiles.append([
            covers[r], stego, secrets[r], matched, wrong, rand,
            residual(covers[r], stego), residual(secrets[r], matched),
        ])
    return write_sample_grid(tiles, _grid_labels(), path)


def _grid_labels() -> List[str]:
    gain = f"x{settings.RESIDUAL_GAIN:g}"
    return ["cover", "stego", "secret", "matched", "mismatched", "random",
            f"|cover-stego| {gain}", f"|secret-rec| {gain}"]


# ============================================
# Feature entanglement
# ============================================
def _scatter_ratio(points: np.ndarray, labels: np.ndarray) -> float:
    """Between-group centroid scatter over within-group scatter."""
    centre = points.mean(axis=0)
    between, within = [], []
    for lab in np.unique(labels):
        group = points[labels == lab]
        centroid = group.mean(axis=0)
        between.append(float(((centroid - centre) ** 2).sum()))
        within.append(float(((group - centroid) ** 2).sum(axis=1).mean()))
    return float(np.mean(between) / max(np.mean(within), 1e-12))


def pca_entanglement(
    model: MaskedBackbone,
    secrets: torch.Tensor,
    covers: torch.Tensor,
    registry: KeyRegistry,
    n_samples: int,
    config: Optional[dict] = None,
) -> PcaResult:
    """
    Project recovery features for every (encode key, decode key) condition
    onto the top two principal components of their pooled, centered covariance.
    """
    n = min(n_samples, secrets.shape[0])
    if n < 2:
        raise ValueError("PCA analysis needs at least 2 samples")
    secrets, covers = secrets[:n], covers[:n]
    model.eval()
    feats, labels, conditions = [], [], []
    for i in registry.indices:
        stego = run_task(model, registry, TaskMode.embed(i), [secrets, covers])
        for j in registry.indices:
            f = extract_recovery_features(model, registry, j, stego).cpu().double().numpy()
            feats.append(f)
            labels.extend([len(conditions)] * f.shape[0])
            conditions.append((i, j))

    x = np.concatenate(feats, axis=0)
    labels = np.asarray(labels)
    pca = PCA(n_components=2, svd_solver="full")
    points = pca.fit_transform(x)
    matched = np.asarray([conditions[lab][0] == conditions[lab][1] for lab in labels])

    out = [
        PcaCondition(
            encode_key=i,
            decode_key=j,
            matched=(i == j),
            points=[(float(p[0]), float(p[1])) for p in points[labels == c]],
        )
        for c, (i, j) in enumerate(conditions)
    ]
    score = _scatter_ratio(points, labels)
    mm_score = _scatter_ratio(points, matched.astype(int)) if len(registry) > 1 else 0.0
    logger.info(f"PCA separation score {score:.3f} (matched vs mismatched {mm_score:.3f})")
    return PcaResult(
        conditions=out,
        separation_score=score,
        matched_vs_mismatched_score=mm_score,
        explained_variance_ratio=tuple(float(v) for v in pca.explained_variance_ratio_),
        config=config,
    )


# ============================================
# Figures
# ============================================
def residual(a: torch.Tensor, b: torch.Tensor, gain: Optional[float] = None) -> torch.Tensor:
    gain = settings.RESIDUAL_GAIN if gain is None else gain
    return ((a - b).abs() * gain).clamp(0.0, 1.0)


def write_sample_grid(rows: Sequence[Sequence[torch.Tensor]], labels: Sequence[str], path: Path) -> Path:
    """Tile (3, H, W) planes row by row under a header of column labels."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = rows[0][0].shape[-2:]
    header, pad = 14, 2
    cols = len(rows[0])
    canvas = Image.new("RGB", (cols * (w + pad) + pad, header + len(rows) * (h + pad) + pad), "white")
    draw = ImageDraw.Draw(canvas)
    for c, label in enumerate(labels):
        draw.text((pad + c * (w + pad), 1), label, fill="black")
    for r, row in enumerate(rows):
        for c, plane in enumerate(row):
            arr = (plane.detach().cpu().double().clamp(0, 1) * 255).round().to(torch.uint8)
            tile = Image.fromarray(arr.permute(1, 2, 0).numpy(), mode="RGB")
            canvas.paste(tile, (pad + c * (w + pad), header + pad + r * (h + pad)))
    canvas.save(path, format="PNG")
    return path


def plot_cross_key_matrix(matrix: CrossKeyMatrix, path: Path, title: str = "") -> Path:
    """Heat-map of PSNR with PSNR/SSIM annotations per cell."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    grid = np.asarray(matrix.psnr_grid())
    k = matrix.size
    fig, ax = plt.subplots(figsize=(1.2 * k + 2, 1.2 * k + 1.5))
    im = ax.imshow(grid, cmap="viridis")
    for i in range(k):
        for j in range(k):
            cell = matrix.cells[i][j]
            ax.text(j, i, f"{cell.psnr:.1f}\n{cell.ssim:.2f}", ha="center", va="center",
                    color="white" if grid[i, j] < grid.mean() else "black", fontsize=8)
    ax.set_xticks(range(k), [f"k{j + 1}" for j in range(k)])
    ax.set_yticks(range(k), [f"k{i + 1}" for i in range(k)])
    ax.set_xlabel("decoding key")
    ax.set_ylabel("encoding key")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, label="PSNR (dB)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_pca(result: PcaResult, path: Path, title: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 5))
    for cond in result.conditions:
        pts = np.asarray(cond.points)
        ax.scatter(pts[:, 0], pts[:, 1], s=8, marker="o" if cond.matched else "x",
                   label=f"e{cond.encode_key}/r{cond.decode_key}")
    ax.set_title(title or f"separation {result.separation_score:.2f}")
    ax.legend(fontsize=6, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
