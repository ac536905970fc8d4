"""
Losses, noise model and the gradient-masked training loop.

Every step runs all four task families on one batch: purification of noisy
images, embedding and matched recovery for every registered key, and
recovery under mismatched keys regressed toward the cover. Only the shared
region W*M is updated; gradients at M = 0 are zeroed before the optimizer
step, so those weights stay bit-identical for the whole run.
"""
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from keystego.backbone import MaskedBackbone
from keystego.data_io import (
    Checkpoint,
    load_checkpoint,
    pair_indices,
    pair_tensors,
    restore_model,
    restore_optimizer,
    save_checkpoint,
    write_json,
)
from keystego.evaluation import evaluate, purification_report
from keystego.keyed_weights import KeyRegistry, ParameterError, ShapeError
from keystego.models import LossWeights, RunConfig, StepReport, TrainConfig

logger = logging.getLogger(__name__)

EVAL_NOISE_SIGMA = 0.05


class TrainingError(RuntimeError):
    """Raised when a training step cannot proceed (non-finite loss, bad setup)."""
    pass


# ============================================
# Noise model
# ============================================
def add_gaussian_noise(clean: torch.Tensor, sigma: Union[float, torch.Tensor], seed: int) -> torch.Tensor:
    """
    clean + N(0, sigma^2) per pixel, clamped to [0, 1].

    `sigma` is a scalar or one value per image of an (N, 3, H, W) batch. The
    noise comes from a CPU torch generator seeded with `seed`, so the result
    is a pure function of its arguments.

    Raises:
        ParameterError: If any sigma is negative
    """
    sigma_t = torch.as_tensor(sigma, dtype=torch.float64)
    if bool((sigma_t < 0).any()):
        raise ParameterError("sigma must be non-negative")
    if sigma_t.ndim == 1:
        if clean.ndim != 4 or sigma_t.shape[0] != clean.shape[0]:
            raise ShapeError("per-image sigma needs an (N, 3, H, W) batch with N sigmas")
        sigma_t = sigma_t.view(-1, 1, 1, 1)
    gen = torch.Generator(device="cpu").manual_seed(int(seed))
    noise = torch.randn(clean.shape, generator=gen, dtype=torch.float64) * sigma_t
    return (clean + noise.to(dtype=clean.dtype, device=clean.device)).clamp(0.0, 1.0)


# ============================================
# Loss terms
# ============================================
def _mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"Shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return F.mse_loss(a, b, reduction="mean")


def _paired_sum(xs: Sequence[torch.Tensor], ys: Sequence[torch.Tensor]) -> torch.Tensor:
    if len(xs) != len(ys) or not xs:
        raise ShapeError(f"Expected two equally long non-empty lists, got {len(xs)} and {len(ys)}")
    return torch.stack([_mse(x, y) for x, y in zip(xs, ys)]).sum()


def loss_emb(stegos: Sequence[torch.Tensor], covers: Sequence[torch.Tensor]) -> torch.Tensor:
    """Sum over keys of the per-key MSE between stego and cover."""
    return _paired_sum(stegos, covers)


def loss_rec(recovered: Sequence[torch.Tensor], secrets: Sequence[torch.Tensor]) -> torch.Tensor:
    """Sum over keys of the per-key MSE between matched recovery and secret."""
    return _paired_sum(recovered, secrets)


def loss_pur(clean: torch.Tensor, purified: torch.Tensor) -> torch.Tensor:
    return _mse(purified, clean)


def loss_mki(
    recover: Callable[[int, torch.Tensor], torch.Tensor],
    stego: torch.Tensor,
    cover: torch.Tensor,
    key_index: int,
    mismatched: Sequence[int],
) -> torch.Tensor:
    """
    Sum over j in `mismatched` of MSE(Recover(j)(stego_i), cover_i).

    `recover(j, x)` runs the network under recovery key j. The cover must be
    the one `stego` was produced from.

    Raises:
        ParameterError: If a mismatched index equals `key_index`
    """
    if key_index in mismatched:
        raise ParameterError(f"Mismatched key list contains the matched index {key_index}")
    if not mismatched:
        return stego.new_zeros(())
    return torch.stack([_mse(recover(j, stego), cover) for j in mismatched]).sum()


@dataclass
class LossTerms:
    emb: torch.Tensor
    rec: torch.Tensor
    pur: torch.Tensor
    mki: torch.Tensor


def loss_total(terms: LossTerms, weights: LossWeights) -> torch.Tensor:
    """lambda_e*emb + lambda_r*rec + lambda_p*pur + lambda_m*mki."""
    return (
        weights.lambda_e * terms.emb
        + weights.lambda_r * terms.rec
        + weights.lambda_p * terms.pur
        + weights.lambda_m * terms.mki
    )


# ============================================
# Batches
# ============================================
@dataclass
class TrainBatch:
    clean: torch.Tensor
    noisy: torch.Tensor
    secrets: Dict[int, torch.Tensor]
    covers: Dict[int, torch.Tensor]
    mismatch: Dict[int, List[int]]

    def to(self, dtype: torch.dtype, device: torch.device) -> "TrainBatch":
        move = lambda t: t.to(dtype=dtype, device=device)
        return TrainBatch(
            clean=move(self.clean),
            noisy=move(self.noisy),
            secrets={i: move(t) for i, t in self.secrets.items()},
            covers={i: move(t) for i, t in self.covers.items()},
            mismatch=self.mismatch,
        )


def mismatch_schedule(num_keys: int, policy: str, rng: np.random.Generator) -> Dict[int, List[int]]:
    """Mismatched recovery keys per embedding key: one random j != i, or all of them."""
    schedule = {}
    for i in range(1, num_keys + 1):
        others = [j for j in range(1, num_keys + 1) if j != i]
        if policy == "exhaustive" or not others:
            schedule[i] = others
        else:
            schedule[i] = [others[int(rng.integers(len(others)))]]
    return schedule


class BatchSampler:
    """
    Deterministic batches: batch(step) depends only on the images, the
    config seeds and `step`, so a resumed run replays the same data.
    """

    def __init__(self, images: torch.Tensor, config: TrainConfig, pairing_seed: int = 0):
        if images.ndim != 4 or images.shape[0] < 2:
            raise TrainingError("Training needs an (N, 3, H, W) tensor with N >= 2")
        self.images = images
        self.config = config
        self.pairing_seed = pairing_seed
        self.n_pairs = images.shape[0] // 2
        self._pair_cache: Dict[Tuple[int, int], List[Tuple[int, int]]] = {}

    def _pairs(self, stream: int, epoch: int) -> List[Tuple[int, int]]:
        cache_key = (stream, epoch)
        if cache_key not in self._pair_cache:
            if len(self._pair_cache) > 64:
                self._pair_cache.clear()
            self._pair_cache[cache_key] = pair_indices(
                self.images.shape[0], self.pairing_seed, epoch, stream=stream
            )
        return self._pair_cache[cache_key]

    def _take_pairs(self, stream: int, step: int) -> List[Tuple[int, int]]:
        b = self.config.batch_size
        out = []
        for pos in range(step * b, (step + 1) * b):
            epoch, offset = divmod(pos, self.n_pairs)
            out.append(self._pairs(stream, epoch)[offset])
        return out

    def batch(self, step: int) -> TrainBatch:
        cfg = self.config
        rng = np.random.default_rng([cfg.data_seed, step])
        n = self.images.shape[0]
        clean_idx = rng.integers(0, n, size=cfg.batch_size)
        lo, hi = cfg.noise_sigma_range
        sigmas = rng.uniform(lo, hi, size=cfg.batch_size) if hi > lo else np.full(cfg.batch_size, lo)
        clean = self.images[torch.from_numpy(clean_idx)]
        noisy = add_gaussian_noise(clean, torch.from_numpy(sigmas), int(rng.integers(0, 2**63)))

        secrets, covers = {}, {}
        for i in range(1, cfg.num_keys + 1):
            pairs = self._take_pairs(i, step)
            secrets[i] = self.images[torch.tensor([s for s, _ in pairs])]
            covers[i] = self.images[torch.tensor([c for _, c in pairs])]
        mismatch = mismatch_schedule(cfg.num_keys, cfg.mismatch_policy, rng)
        return TrainBatch(clean=clean, noisy=noisy, secrets=secrets, covers=covers, mismatch=mismatch)


# ============================================
# Step
# ============================================
def compute_losses(model: MaskedBackbone, registry: KeyRegistry, batch: TrainBatch) -> LossTerms:
    """Differentiable loss terms for one batch, all four task families."""
    manifest = model.manifest
    purified = model(batch.noisy)
    pur = loss_pur(batch.clean, purified)

    def recover(j: int, stego: torch.Tensor) -> torch.Tensor:
        return model(stego, fill=registry.recover_fill(j, manifest))

    stegos, covers, recovered, secrets, mki_terms = [], [], [], [], []
    for i in registry.indices:
        secret, cover = batch.secrets[i], batch.covers[i]
        stego = model(torch.cat([secret, cover], dim=1), fill=registry.embed_fill(i, manifest))
        stegos.append(stego)
        covers.append(cover)
        recovered.append(recover(i, stego))
        secrets.append(secret)
        mki_terms.append(loss_mki(recover, stego, cover, i, batch.mismatch.get(i, [])))

    return LossTerms(
        emb=loss_emb(stegos, covers),
        rec=loss_rec(recovered, secrets),
        pur=pur,
        mki=torch.stack(mki_terms).sum(),
    )


def train_step(
    model: MaskedBackbone,
    optimizer: torch.optim.Optimizer,
    registry: KeyRegistry,
    batch: TrainBatch,
    weights: LossWeights,
    step: int,
) -> StepReport:
    """
    One optimization step over the shared region.

    Raises:
        TrainingError: If the total loss is not finite (weights are left untouched)
    """
    start = time.perf_counter()
    model.train()
    optimizer.zero_grad(set_to_none=True)
    terms = compute_losses(model, registry, batch)
    total = loss_total(terms, weights)
    if not bool(torch.isfinite(total)):
        logger.error(
            f"Non-finite loss at step {step}: emb={terms.emb.item()} rec={terms.rec.item()} "
            f"pur={terms.pur.item()} mki={terms.mki.item()}"
        )
        raise TrainingError(f"Non-finite total loss at step {step}")
    total.backward()
    model.mask_gradients()
    optimizer.step()
    return StepReport(
        step=step,
        emb=float(terms.emb.detach()),
        rec=float(terms.rec.detach()),
        pur=float(terms.pur.detach()),
        mki=float(terms.mki.detach()),
        total=float(total.detach()),
        wall_time=time.perf_counter() - start,
    )


# ============================================
# Metrics log
# ============================================
class MetricsLog:
    """
    JSON-lines metrics stream: one object per line, always carrying
    `event` (step | eval | checkpoint) and `step`.
    """

    def __init__(self, path: Optional[Path]):
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, event: str, step: int, **fields) -> None:
        if self.path is None:
            return
        record = {"event": event, "step": step, **fields}
        with self.path.open("a", encoding="utf8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")


# ============================================
# Trainer
# ============================================
class Trainer:
    """Owns model state and optimizer for one run; single writer over both."""

    def __init__(
        self,
        config: RunConfig,
        registry: KeyRegistry,
        train_images: torch.Tensor,
        val_images: Optional[torch.Tensor] = None,
        run_dir: Optional[Path] = None,
        device: Union[str, torch.device] = "cpu",
    ):
        if len(registry) != config.train.num_keys:
            raise TrainingError(
                f"Config expects K={config.train.num_keys} key pairs, got {len(registry)}"
            )
        self.config = config
        self.registry = registry
        self.device = torch.device(device)
        self.dtype = torch.float64 if config.train.dtype == "float64" else torch.float32
        self.model = MaskedBackbone(
            config.backbone, config.train.alpha, config.train.mask_seed, config.train.init_seed
        ).to(device=self.device, dtype=self.dtype)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=config.train.learning_rate)
        self.step = 0
        self.sampler = BatchSampler(train_images, config.train, config.data.pairing_seed)
        self.val_images = val_images
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.metrics = MetricsLog(self.run_dir / "metrics.jsonl" if self.run_dir else None)
        self.history: List[StepReport] = []

    @classmethod
    def from_checkpoint(
        cls,
        path: Path,
        registry: KeyRegistry,
        train_images: torch.Tensor,
        val_images: Optional[torch.Tensor] = None,
        run_dir: Optional[Path] = None,
        device: Union[str, torch.device] = "cpu",
    ) -> "Trainer":
        ckpt = load_checkpoint(path)
        trainer = cls(ckpt.config, registry, train_images, val_images, run_dir, device)
        trainer.model = restore_model(ckpt).to(device=trainer.device, dtype=trainer.dtype)
        trainer.optimizer = torch.optim.Adam(trainer.model.parameters(), lr=ckpt.config.train.learning_rate)
        restore_optimizer(ckpt, trainer.optimizer)
        trainer.step = ckpt.step
        logger.info(f"Resumed from {path} at step {trainer.step}")
        return trainer

    def snapshot(self) -> MaskedBackbone:
        """Read-only copy of the current model for evaluation."""
        snap = MaskedBackbone(
            self.config.backbone, self.model.alpha, self.model.mask_seed, self.model.init_seed,
            mask=self.model.mask,
        ).to(device=self.device, dtype=self.dtype)
        snap.load_state_dict(self.model.state_dict())
        return snap.eval()

    def train_step(self, batch: Optional[TrainBatch] = None) -> StepReport:
        if batch is None:
            batch = self.sampler.batch(self.step)
        report = train_step(
            self.model,
            self.optimizer,
            self.registry,
            batch.to(self.dtype, self.device),
            self.config.loss,
            self.step,
        )
        self.step += 1
        self.history.append(report)
        return report

    def checkpoint(self, path: Optional[Path] = None) -> Optional[Path]:
        if path is None:
            if self.run_dir is None:
                return None
            path = self.run_dir / "checkpoints" / f"step_{self.step:07d}.ckpt"
        save_checkpoint(path, Checkpoint.capture(self.model, self.optimizer, self.step, self.config))
        self.metrics.append("checkpoint", self.step, path=str(path))
        return path

    def evaluate(self, n_samples: Optional[int] = None) -> Optional[Dict]:
        if self.val_images is None or self.val_images.shape[0] < 2:
            return None
        snap = self.snapshot()
        n = min(n_samples or self.config.train.eval_samples, self.val_images.shape[0] // 2)
        secrets, covers = pair_tensors(self.val_images, self.config.data.pairing_seed, limit=n)
        report = evaluate(snap, secrets, covers, self.registry)
        noisy = add_gaussian_noise(covers, EVAL_NOISE_SIGMA, self.config.train.data_seed)
        pur = purification_report(snap, covers, noisy, sigma=EVAL_NOISE_SIGMA)
        payload = {"report": report.model_dump(), "purification": pur.model_dump()}
        self.metrics.append("eval", self.step, **payload)
        logger.info(
            f"[eval step {self.step}] stego PSNR {report.imperceptibility.psnr:.2f} dB, "
            f"recovery PSNR {report.recoverability.psnr:.2f} dB, "
            f"cross PSNR {report.cross_decoding.psnr if report.cross_decoding else float('nan'):.2f} dB, "
            f"purify gain {pur.gain_db:.2f} dB"
        )
        return payload

    def run(self, steps: Optional[int] = None) -> Optional[Path]:
        """Train until `steps` total steps (config default), evaluating and checkpointing on cadence."""
        target = self.config.train.steps if steps is None else steps
        cfg = self.config.train
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            (self.run_dir / "run_config.json").write_text(self.config.to_json(), encoding="utf8")
        logger.info(f"Training K={len(self.registry)} alpha={cfg.alpha} from step {self.step} to {target}")

        last_path = None
        while self.step < target:
            report = self.train_step()
            if report.step % cfg.log_every == 0 or self.step == target:
                self.metrics.append("step", report.step, **report.model_dump(exclude={"step"}))
                logger.info(
                    f"step {report.step}: total={report.total:.5f} emb={report.emb:.5f} "
                    f"rec={report.rec:.5f} pur={report.pur:.5f} mki={report.mki:.5f}"
                )
            if cfg.eval_every and self.step % cfg.eval_every == 0:
                self.evaluate()
            if cfg.checkpoint_every and self.step % cfg.checkpoint_every == 0:
                last_path = self.checkpoint()

        if self.run_dir is not None:
            last_path = self.checkpoint(self.run_dir / "checkpoints" / "last.ckpt")
        return last_path


def train(
    config: RunConfig,
    registry: KeyRegistry,
    train_images: torch.Tensor,
    val_images: Optional[torch.Tensor] = None,
    run_dir: Optional[Path] = None,
    resume_from: Optional[Path] = None,
    device: Union[str, torch.device] = "cpu",
) -> Trainer:
    """Run (or resume) training to `config.train.steps`; returns the trainer for inspection."""
    if resume_from is not None:
        trainer = Trainer.from_checkpoint(resume_from, registry, train_images, val_images, run_dir, device)
        ignored = resume_overrides(trainer.config, config)
        if ignored:
            logger.warning(
                f"Resuming with the checkpoint settings; ignoring {', '.join(ignored)} from the given config"
            )
    else:
        trainer = Trainer(config, registry, train_images, val_images, run_dir, device)
    trainer.run(config.train.steps)
    if run_dir is not None and val_images is not None:
        final = trainer.evaluate()
        if final is not None:
            write_json(Path(run_dir) / "eval_report.json", {**final, "config": config.model_dump()})
    return trainer


def resume_overrides(saved: RunConfig, given: RunConfig) -> List[str]:
    """Dotted backbone/loss/train fields (other than train.steps) where `given` differs from `saved`."""
    changed = []
    for section in ("backbone", "loss", "train"):
        old = getattr(saved, section).model_dump()
        new = getattr(given, section).model_dump()
        changed += [f"{section}.{k}" for k in old if old[k] != new[k] and f"{section}.{k}" != "train.steps"]
    return changed


def loss_decomposition_error(report: StepReport, weights: LossWeights) -> float:
    """Relative gap between the reported total and the weighted sum of reported terms."""
    recomputed = (
        weights.lambda_e * report.emb
        + weights.lambda_r * report.rec
        + weights.lambda_p * report.pur
        + weights.lambda_m * report.mki
    )
    return abs(report.total - recomputed) / max(abs(recomputed), 1e-12)
