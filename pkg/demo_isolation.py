"""
Demo of key isolation on a tiny in-process run.

Prerequisites:
1. Install dependencies: pip install -r requirements.txt
2. Run: python demo_isolation.py [--steps 300]

Trains a small backbone for three generated key pairs on synthetic images,
then hides one image, recovers it with the matched key, a mismatched
registered key and an unregistered random key, and purifies a noisy image.
Everything stays in memory except the sample grid written to demo_grid.png.
"""
import argparse
import importlib.util
import time
from pathlib import Path

import numpy as np
import torch

from keystego.evaluation import cross_key_matrix, metric_triple, purification_report, qualitative_grid
from keystego.keyed_weights import KeyRegistry, generate_key_weights
from keystego.backbone import TaskMode, run_task, run_with_fill
from keystego.models import BackboneConfig, DatasetSpec, RunConfig, TrainConfig
from keystego.training import Trainer, add_gaussian_noise

SIDE = 32


def print_header(text: str):
    """Print formatted header."""
    print("\n" + "=" * 70)
    print(f"  {text}")
    print("=" * 70)


def print_triple(label: str, triple):
    print(f"  {label:<28} PSNR {triple.psnr:6.2f} dB   SSIM {triple.ssim:5.3f}   MAE {triple.mae:.4f}")


def synthetic_images(count: int, seed: int) -> torch.Tensor:
    script = Path(__file__).parent / "scripts" / "make_synthetic_dataset.py"
    spec = importlib.util.spec_from_file_location("make_synthetic_dataset", script)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    rng = np.random.default_rng(seed)
    planes = [np.asarray(module.make_image(rng, SIDE), dtype=np.float32) / 255.0 for _ in range(count)]
    return torch.from_numpy(np.stack(planes)).permute(0, 3, 1, 2).contiguous()


def run_demo(steps: int):
    print_header("1. SETUP")
    config = RunConfig(
        run_name="demo",
        backbone=BackboneConfig(width=16, depth=2, side=SIDE),
        train=TrainConfig(num_keys=3, alpha=0.7, steps=steps, batch_size=4, learning_rate=1e-3,
                          eval_every=0, checkpoint_every=0, log_every=50),
        data=DatasetSpec(side=SIDE),
    )
    registry = KeyRegistry.random(3, seed=7)
    train_images = synthetic_images(64, seed=0)
    test_images = synthetic_images(8, seed=1)
    print(f"Registry: {registry}")
    print(f"Training images: {train_images.shape[0]} at {SIDE}x{SIDE}")

    print_header(f"2. TRAINING ({steps} steps)")
    trainer = Trainer(config, registry, train_images)
    start = time.time()
    trainer.run()
    last = trainer.history[-1]
    print(f"Done in {time.time() - start:.1f}s: total={last.total:.4f} emb={last.emb:.4f} "
          f"rec={last.rec:.4f} pur={last.pur:.4f} mki={last.mki:.4f}")

    print_header("3. HIDE AND RECOVER")
    model = trainer.snapshot()
    secret, cover = test_images[0], test_images[1]
    stego = run_task(model, registry, TaskMode.embed(1), [secret, cover]).cpu()
    matched = run_task(model, registry, TaskMode.recover(1), [stego]).cpu()
    mismatched = run_task(model, registry, TaskMode.recover(2), [stego]).cpu()
    random_fill = generate_key_weights(0x5EED, model.manifest)
    stranger = run_with_fill(model, random_fill, TaskMode.recover(1), [stego]).cpu()
    print_triple("stego vs cover", metric_triple(cover, stego))
    print_triple("matched key vs secret", metric_triple(secret, matched))
    print_triple("mismatched key vs secret", metric_triple(secret, mismatched))
    print_triple("mismatched key vs cover", metric_triple(cover, mismatched))
    print_triple("random key vs secret", metric_triple(secret, stranger))

    print_header("4. CROSS-KEY MATRIX (PSNR dB)")
    secrets, covers = test_images[0::2], test_images[1::2]
    matrix = cross_key_matrix(model, secrets, covers, registry)
    for i, row in enumerate(matrix.psnr_grid(), start=1):
        print(f"  embed k{i}: " + "  ".join(f"{v:6.2f}" for v in row))
    print(f"  diagonal margin: {matrix.diagonal_margin_db():.2f} dB")

    print_header("5. PURIFICATION")
    noisy = add_gaussian_noise(covers, 0.05, seed=3)
    pur = purification_report(model, covers, noisy, sigma=0.05)
    print_triple("noisy vs clean", pur.noisy_vs_clean)
    print_triple("purified vs clean", pur.purified_vs_clean)

    grid = qualitative_grid(model, secrets, covers, registry, Path("demo_grid.png"))

    print_header("DEMO COMPLETE")
    print(f"""
Summary:
  • Trained one backbone for {len(registry)} key pairs in {steps} steps
  • Sample grid written to {grid}

Next steps:
  1. Generate a dataset: python scripts/make_synthetic_dataset.py
  2. Train at desk scale: python -m keystego train --config configs/desk.json --random-keys 0
  3. Inspect runs/desk/metrics.jsonl and the cross-key heat-map
    """)


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("--steps", type=int, default=300)
    args = parser.parse_args()
    try:
        run_demo(args.steps)
    except KeyboardInterrupt:
        print("\n\nDemo interrupted by user")
