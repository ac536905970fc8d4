"""
Command-line entry point.

    python -m keystego train       --config run.json [--set train.steps=200]
    python -m keystego embed       --checkpoint C (--key K | --index I) --secret s.png --cover c.png --out stego.png
    python -m keystego recover     --checkpoint C (--key K | --index I) --stego stego.png --out secret.png [--secret ref.png]
    python -m keystego purify      --checkpoint C --noisy n.png --out clean.png [--clean ref.png]
    python -m keystego evaluate    --checkpoint C [--data DIR --split test --side 64]
    python -m keystego crossmatrix --checkpoint C [--data DIR]
    python -m keystego sweep       --config run.json --k-list 2,4 --alpha-list 0.5,0.9
    python -m keystego probe       --checkpoint C --n-random 10
    python -m keystego pca         --checkpoint C [--baseline C0]

Registered keys come from --keys or KEYSTEGO_KEYS ("embed:recover,..."),
decimal or 0x-hex; --index I picks pair I from them. Keys are never written
to logs, reports or checkpoints.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import torch
from pydantic import ValidationError

from keystego import __version__, settings
from keystego.backbone import BackboneConfigError, TaskError, TaskMode, run_with_fill
from keystego.data_io import (
    CheckpointError,
    DatasetError,
    load_checkpoint,
    load_dataset,
    load_image,
    pair_tensors,
    restore_model,
    save_image,
    write_json,
)
from keystego.evaluation import (
    cross_key_matrix,
    evaluate,
    pca_entanglement,
    plot_cross_key_matrix,
    plot_pca,
    psnr,
    purification_report,
    qualitative_grid,
    random_key_probe,
)
from keystego.keyed_weights import (
    KeyFormatError,
    KeyRegistry,
    ParameterError,
    generate_key_weights,
    parse_key,
    parse_key_pairs,
)
from keystego.models import DatasetSpec, RunConfig
from keystego.training import EVAL_NOISE_SIGMA, TrainingError, add_gaussian_noise, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def setup_logging() -> None:
    settings.ensure_directories()
    logging.basicConfig(
        level=settings.log_level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(settings.log_file),
            logging.StreamHandler()
        ]
    )


# ============================================
# Shared helpers
# ============================================
def resolve_registry(args: argparse.Namespace, required: bool = True) -> Optional[KeyRegistry]:
    """Registry from --keys, then KEYSTEGO_KEYS, then --random-keys SEED (experiments only)."""
    if getattr(args, "keys", None):
        return parse_key_pairs(args.keys)
    if settings.keys is not None:
        return parse_key_pairs(settings.keys.get_secret_value())
    seed = getattr(args, "random_keys", None)
    if seed is not None and getattr(args, "_num_keys", None):
        logger.warning("Using generated experiment keys; do not use them for real messages")
        return KeyRegistry.random(args._num_keys, seed)
    if required:
        raise KeyFormatError("No keys given: pass --keys or set KEYSTEGO_KEYS")
    return None


def device_from(args: argparse.Namespace) -> torch.device:
    if settings.num_threads:
        torch.set_num_threads(settings.num_threads)
    return torch.device(getattr(args, "device", None) or settings.device)


def load_model(path: Path, device: torch.device):
    ckpt = load_checkpoint(path)
    model = restore_model(ckpt, device)
    logger.info(f"Loaded checkpoint {path} (step {ckpt.step}, alpha={ckpt.alpha})")
    return ckpt, model


def eval_dataset_spec(args: argparse.Namespace, config: RunConfig) -> DatasetSpec:
    spec = config.data.for_split(args.split or config.eval_split)
    update = {}
    if args.data:
        update["root"] = str(Path(args.data).resolve())
    if args.side:
        update["side"] = args.side
    return spec.model_copy(update=update) if update else spec


def eval_pairs(args: argparse.Namespace, config: RunConfig):
    spec = eval_dataset_spec(args, config)
    images = load_dataset(spec)
    return pair_tensors(images, spec.pairing_seed, args.limit)


def output_dir(args: argparse.Namespace, config: Optional[RunConfig], name: str) -> Path:
    if args.out_dir:
        return Path(args.out_dir)
    run = config.run_name if config is not None else "adhoc"
    return settings.runs_path / run / name


def registry_for(args: argparse.Namespace, num_keys: int) -> KeyRegistry:
    args._num_keys = num_keys
    registry = resolve_registry(args)
    if len(registry) != num_keys:
        raise KeyFormatError(f"Expected {num_keys} key pairs, got {len(registry)}")
    return registry


# ============================================
# Subcommands
# ============================================
def cmd_train(args: argparse.Namespace) -> int:
    if args.config is None and args.resume is not None:
        config = RunConfig.from_dict(load_checkpoint(args.resume).config.model_dump(mode="json"), args.set)
    else:
        config = RunConfig.from_file(args.config, args.set)
    registry = registry_for(args, config.train.num_keys)
    device = device_from(args)
    run_dir = Path(config.output_dir) if config.output_dir else settings.runs_path / config.run_name

    train_images = load_dataset(config.data.for_split("train"))
    try:
        val_images = load_dataset(config.data.for_split(config.eval_split))
    except DatasetError as e:
        logger.warning(f"No evaluation split available ({e}); training without periodic evaluation")
        val_images = None

    trainer = train(config, registry, train_images, val_images, run_dir, args.resume, device)
    logger.info(f"Training finished at step {trainer.step}; run directory {run_dir}")
    return EXIT_OK


def key_from(args: argparse.Namespace, role: str) -> int:
    """--key VALUE, or --index I into the registered pairs (--keys / KEYSTEGO_KEYS)."""
    if args.key is not None:
        return parse_key(args.key)
    pair = resolve_registry(args).pair(args.index)
    return pair.k_embed if role == "embed" else pair.k_recover


def cmd_embed(args: argparse.Namespace) -> int:
    key = key_from(args, "embed")
    _, model = load_model(args.checkpoint, device_from(args))
    side = model.config.side
    secret, cover = load_image(args.secret, side), load_image(args.cover, side)
    fill = generate_key_weights(key, model.manifest)
    stego = run_with_fill(model, fill, TaskMode.embed(1), [secret, cover]).cpu()
    save_image(stego, args.out)
    logger.info(f"Wrote stego image {args.out} (PSNR vs cover {psnr(cover, stego):.2f} dB)")
    return EXIT_OK


def cmd_recover(args: argparse.Namespace) -> int:
    key = key_from(args, "recover")
    _, model = load_model(args.checkpoint, device_from(args))
    side = model.config.side
    stego = load_image(args.stego, side)
    fill = generate_key_weights(key, model.manifest)
    recovered = run_with_fill(model, fill, TaskMode.recover(1), [stego]).cpu()
    save_image(recovered, args.out)
    message = f"Wrote recovered image {args.out}"
    if args.secret:
        message += f" (PSNR vs secret {psnr(load_image(args.secret, side), recovered):.2f} dB)"
    logger.info(message)
    return EXIT_OK


def cmd_purify(args: argparse.Namespace) -> int:
    _, model = load_model(args.checkpoint, device_from(args))
    side = model.config.side
    noisy = load_image(args.noisy, side)
    purified = run_with_fill(model, None, TaskMode.purify(), [noisy]).cpu()
    save_image(purified, args.out)
    message = f"Wrote purified image {args.out}"
    if args.clean:
        clean = load_image(args.clean, side)
        message += f" (PSNR vs clean {psnr(clean, purified):.2f} dB, input {psnr(clean, noisy):.2f} dB)"
    logger.info(message)
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    ckpt, model = load_model(args.checkpoint, device_from(args))
    registry = registry_for(args, ckpt.config.train.num_keys)
    secrets, covers = eval_pairs(args, ckpt.config)
    snapshot = ckpt.config.model_dump(mode="json")
    report = evaluate(model, secrets, covers, registry, config=snapshot)
    noisy = add_gaussian_noise(covers, EVAL_NOISE_SIGMA, args.seed)
    pur = purification_report(model, covers, noisy, sigma=EVAL_NOISE_SIGMA)
    out = output_dir(args, ckpt.config, "evaluate")
    write_json(out / "eval_report.json", {"report": report.model_dump(), "purification": pur.model_dump()})
    qualitative_grid(model, secrets, covers, registry, out / "eval_grid.png", seed=args.seed)
    logger.info(
        f"imperceptibility {report.imperceptibility.psnr:.2f} dB / {report.imperceptibility.ssim:.3f}, "
        f"recoverability {report.recoverability.psnr:.2f} dB / {report.recoverability.ssim:.3f}, "
        f"purification gain {pur.gain_db:.2f} dB"
    )
    if report.cross_decoding is not None:
        logger.info(
            f"cross decoding {report.cross_decoding.psnr:.2f} dB / {report.cross_decoding.ssim:.3f}, "
            f"cover regression rate {report.cover_regression_rate:.3f}"
        )
    return EXIT_OK


def cmd_crossmatrix(args: argparse.Namespace) -> int:
    ckpt, model = load_model(args.checkpoint, device_from(args))
    registry = registry_for(args, ckpt.config.train.num_keys)
    secrets, covers = eval_pairs(args, ckpt.config)
    matrix = cross_key_matrix(model, secrets, covers, registry, config=ckpt.config.model_dump(mode="json"))
    out = output_dir(args, ckpt.config, "crossmatrix")
    write_json(out / "cross_key_matrix.json", matrix)
    plot_cross_key_matrix(matrix, out / "cross_key_matrix.png",
                          title=f"K={matrix.size}, alpha={ckpt.alpha}")
    margin = matrix.diagonal_margin_db()
    logger.info(f"Cross-key matrix written to {out}" + (f" (diagonal margin {margin:.2f} dB)" if margin is not None else ""))
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    base = RunConfig.from_file(args.config, args.set)
    device = device_from(args)
    k_list = [int(k) for k in args.k_list.split(",") if k.strip()]
    alpha_list = [float(a) for a in args.alpha_list.split(",") if a.strip()]
    root = Path(args.out_dir) if args.out_dir else settings.runs_path / f"{base.run_name}-sweep"

    train_images = load_dataset(base.data.for_split("train"))
    eval_images = load_dataset(base.data.for_split(base.eval_split))
    secrets, covers = pair_tensors(eval_images, base.data.pairing_seed, args.limit)

    summary = []
    for k in k_list:
        for alpha in alpha_list:
            cell_name = f"K{k}_alpha{alpha:g}"
            config = base.model_copy(update={
                "run_name": cell_name,
                "train": base.train.model_copy(update={"num_keys": k, "alpha": alpha}),
            }, deep=True)
            config = RunConfig.model_validate(config.model_dump())
            registry = KeyRegistry.random(k, args.key_seed + k)
            logger.info(f"Sweep cell {cell_name}: training {config.train.steps} steps")
            trainer = train(config, registry, train_images, None, root / cell_name, device=device)
            matrix = cross_key_matrix(trainer.snapshot(), secrets, covers, registry,
                                      config=config.model_dump(mode="json"))
            write_json(root / cell_name / "cross_key_matrix.json", matrix)
            plot_cross_key_matrix(matrix, root / cell_name / "cross_key_matrix.png",
                                  title=f"K={k}, alpha={alpha:g}")
            diag = [matrix.cells[i][i] for i in range(k)]
            off = [matrix.cells[i][j] for i in range(k) for j in range(k) if i != j]
            summary.append({
                "num_keys": k,
                "alpha": alpha,
                "diagonal_psnr": sum(c.psnr for c in diag) / k,
                "diagonal_ssim": sum(c.ssim for c in diag) / k,
                "off_diagonal_psnr": sum(c.psnr for c in off) / len(off) if off else None,
                "off_diagonal_ssim": sum(c.ssim for c in off) / len(off) if off else None,
                "diagonal_margin_db": matrix.diagonal_margin_db(),
                "rows_diagonal_dominant": matrix.rows_diagonal_dominant(),
            })
    write_json(root / "sweep_summary.json", {"cells": summary, "config": base.model_dump(mode="json")})
    logger.info(f"Sweep finished: {len(summary)} cells under {root}")
    return EXIT_OK


def cmd_probe(args: argparse.Namespace) -> int:
    ckpt, model = load_model(args.checkpoint, device_from(args))
    registry = registry_for(args, ckpt.config.train.num_keys)
    secrets, covers = eval_pairs(args, ckpt.config)
    out = output_dir(args, ckpt.config, "probe")
    report = random_key_probe(
        model, secrets, covers, registry, args.n_random, args.seed,
        grid_path=out / "probe_grid.png", config=ckpt.config.model_dump(mode="json"),
    )
    write_json(out / "probe_report.json", report)
    logger.info(
        f"random keys: PSNR vs secret {report.vs_secret.psnr:.2f} dB, "
        f"max SSIM vs secret {report.max_ssim_vs_secret:.3f}"
    )
    return EXIT_OK


def cmd_pca(args: argparse.Namespace) -> int:
    device = device_from(args)
    ckpt, model = load_model(args.checkpoint, device)
    registry = registry_for(args, ckpt.config.train.num_keys)
    secrets, covers = eval_pairs(args, ckpt.config)
    out = output_dir(args, ckpt.config, "pca")
    result = pca_entanglement(model, secrets, covers, registry, args.n_samples,
                              config=ckpt.config.model_dump(mode="json"))
    payload = {"isolated": result.model_dump()}
    plot_pca(result, out / "pca.png")
    if args.baseline:
        base_ckpt, base_model = load_model(args.baseline, device)
        if base_ckpt.config.train.num_keys != ckpt.config.train.num_keys:
            raise KeyFormatError("Baseline checkpoint was trained for a different number of keys")
        baseline = pca_entanglement(base_model, secrets, covers, registry, args.n_samples,
                                    config=base_ckpt.config.model_dump(mode="json"))
        payload["baseline"] = baseline.model_dump()
        plot_pca(baseline, out / "pca_baseline.png")
        logger.info(
            f"separation: baseline {baseline.separation_score:.3f} vs isolated {result.separation_score:.3f}"
        )
    write_json(out / "pca_points.json", payload)
    return EXIT_OK


# ============================================
# Parser
# ============================================
def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--device", default=None, help="cpu | cuda[:n] (default: KEYSTEGO_DEVICE)")
    p.add_argument("--out-dir", default=None, help="output folder (default: runs/<run>/<command>)")


def _add_keys(p: argparse.ArgumentParser) -> None:
    p.add_argument("--keys", default=None, help="embed:recover,... (default: KEYSTEGO_KEYS)")


def _add_key_choice(p: argparse.ArgumentParser, role: str) -> None:
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--key", default=None, help=f"{role} key value")
    group.add_argument("--index", type=int, default=None, help=f"use the {role} key of registered pair I")
    _add_keys(p)


def _add_eval_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", default=None, help="dataset root (default: checkpoint config)")
    p.add_argument("--split", default=None, choices=["train", "val", "test"])
    p.add_argument("--side", type=int, default=None, help="evaluation side length")
    p.add_argument("--limit", type=int, default=None, help="max number of (secret, cover) pairs")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="keystego", description="Multi-key sparse-weight-filling steganography")
    parser.add_argument("--version", action="version", version=f"keystego {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a backbone for K key pairs")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--set", action="append", default=[], metavar="SECTION.FIELD=VALUE")
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to resume from")
    p.add_argument("--random-keys", type=int, default=None, metavar="SEED",
                   help="generate experiment keys from SEED when no keys are given")
    _add_keys(p)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="hide a secret image in a cover image")
    p.add_argument("--checkpoint", type=Path, required=True)
    _add_key_choice(p, "embedding")
    p.add_argument("--secret", type=Path, required=True)
    p.add_argument("--cover", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_common(p)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("recover", help="reveal the secret hidden in a stego image")
    p.add_argument("--checkpoint", type=Path, required=True)
    _add_key_choice(p, "recovery")
    p.add_argument("--stego", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--secret", type=Path, default=None, help="reference secret for a PSNR report")
    _add_common(p)
    p.set_defaults(func=cmd_recover)

    p = sub.add_parser("purify", help="denoise an image with the untriggered network")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--noisy", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--clean", type=Path, default=None, help="reference clean image for a PSNR report")
    _add_common(p)
    p.set_defaults(func=cmd_purify)

    for name, func, help_text in (
        ("evaluate", cmd_evaluate, "imperceptibility / recoverability / cross-decoding report"),
        ("crossmatrix", cmd_crossmatrix, "K x K recoverability matrix and heat-map"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_eval_data(p)
        _add_keys(p)
        _add_common(p)
        p.set_defaults(func=func)

    p = sub.add_parser("probe", help="decode stegos with unregistered random keys")
    _add_eval_data(p)
    p.add_argument("--n-random", type=int, default=10)
    _add_keys(p)
    _add_common(p)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("pca", help="PCA of recovery features per (encode, decode) key")
    _add_eval_data(p)
    p.add_argument("--n-samples", type=int, default=32)
    p.add_argument("--baseline", type=Path, default=None, help="checkpoint trained without isolation loss")
    _add_keys(p)
    _add_common(p)
    p.set_defaults(func=cmd_pca)

    p = sub.add_parser("sweep", help="train and score a grid of (K, alpha) settings")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--set", action="append", default=[], metavar="SECTION.FIELD=VALUE")
    p.add_argument("--k-list", default="2,4")
    p.add_argument("--alpha-list", default="0.5,0.9")
    p.add_argument("--key-seed", type=int, default=0, help="seed for generated experiment keys")
    p.add_argument("--limit", type=int, default=None, help="max number of evaluation pairs")
    _add_common(p)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging()
    logger.info("=" * 60)
    logger.info(f"keystego v{__version__} - {args.command}")
    logger.info("=" * 60)

    try:
        return args.func(args)
    except (ValidationError, KeyFormatError, ParameterError, BackboneConfigError, TaskError, ValueError) as e:
        logger.error(f"Invalid configuration or input: {e}")
        return EXIT_USAGE
    except (CheckpointError, DatasetError, TrainingError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
