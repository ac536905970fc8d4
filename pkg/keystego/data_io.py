"""
Image ingestion, cover/secret pairing and checkpoint persistence.

Checkpoint archive layout (zip, stored uncompressed):

    manifest.json        format "keystego-checkpoint", version, step, alpha,
                         mask_seed, init_seed, shape_manifest, config snapshot,
                         tensor index and optimizer state skeleton
    blobs/NNNNN.bin      raw little-endian arrays referenced by the index

The mask and key-seeded fills are never stored: the mask is regenerated from
(shape_manifest, alpha, mask_seed) and fills from keys supplied at run time.
"""
import json
import logging
import os
import tempfile
import zipfile
from dataclasses import dataclass
from itertools import islice
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from pydantic import BaseModel, ValidationError
from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_exponential

from keystego.backbone import MaskedBackbone
from keystego.config import settings
from keystego.keyed_weights import ShapeManifest, WeightSet
from keystego.models import DatasetSpec, RunConfig

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "keystego-checkpoint"
CHECKPOINT_FORMAT_VERSION = 1
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp", ".tif", ".tiff"}
_DTYPES = {"float32": np.float32, "float64": np.float64, "int64": np.int64, "bool": np.bool_}


class DatasetError(RuntimeError):
    """Raised when a dataset split is missing, empty or too small."""
    pass


class CheckpointError(RuntimeError):
    """Raised when a checkpoint archive is unreadable or incomplete."""
    pass


class CheckpointVersionError(CheckpointError):
    """Raised when a checkpoint was written with an unsupported format version."""
    pass


# ============================================
# Images
# ============================================
def load_image(path: Path, side: Optional[int] = None) -> torch.Tensor:
    """Decode an 8-bit RGB image into a (3, H, W) float32 plane in [0, 1]."""
    with Image.open(path) as img:
        img = img.convert("RGB")
        if side is not None and img.size != (side, side):
            img = img.resize((side, side), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.uint8)
    return torch.from_numpy(arr.astype(np.float32) / 255.0).permute(2, 0, 1).contiguous()


def save_image(plane: torch.Tensor, path: Path) -> Path:
    """Write a (3, H, W) plane as an 8-bit PNG (values clamped and rounded)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = (plane.detach().cpu().double().clamp(0.0, 1.0) * 255.0).round().to(torch.uint8)
    Image.fromarray(arr.permute(1, 2, 0).numpy(), mode="RGB").save(path, format="PNG")
    return path


def dataset_root(spec: DatasetSpec) -> Path:
    """`spec.root`, taken relative to KEYSTEGO_DATA_DIR unless absolute."""
    root = Path(spec.root)
    return root if root.is_absolute() else settings.data_path / root


def split_dir(spec: DatasetSpec) -> Path:
    """root/<split> when it exists, otherwise root itself."""
    root = dataset_root(spec)
    candidate = root / spec.split
    if candidate.is_dir():
        return candidate
    if root.is_dir():
        logger.warning(f"No '{spec.split}' folder under {root}; using the root folder directly")
        return root
    raise DatasetError(f"Dataset folder not found: {root}")


def load_dataset(spec: DatasetSpec) -> torch.Tensor:
    """
    Load every decodable image of a split as an (N, 3, side, side) tensor.

    Files are sorted by name, then ordered by a permutation drawn from
    `spec.pairing_seed`. Undecodable files are skipped with a warning.

    Raises:
        DatasetError: If the split folder is missing or yields fewer than 2 images
    """
    folder = split_dir(spec)
    files = sorted(p for p in folder.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    planes = []
    for p in files:
        try:
            planes.append(load_image(p, spec.side))
        except (OSError, UnidentifiedImageError, ValueError) as e:
            logger.warning(f"Skipping unreadable image {p}: {e}")
            continue

    if not planes:
        raise DatasetError(f"No readable images in {folder}")
    if len(planes) < 2:
        raise DatasetError(f"Need at least 2 images in {folder} (covers and secrets must differ)")

    order = np.random.default_rng(spec.pairing_seed).permutation(len(planes))
    if spec.max_images is not None:
        order = order[: spec.max_images]
    images = torch.stack([planes[i] for i in order])
    logger.info(f"Loaded {images.shape[0]} images from {folder} at {spec.side}x{spec.side}")
    return images


def pair_indices(n: int, seed: int, epoch: int, stream: int = 0) -> List[Tuple[int, int]]:
    """
    (secret, cover) index pairs for one epoch: a seeded shuffle split into two
    disjoint halves, so no pair uses the same image twice.
    """
    if n < 2:
        raise DatasetError("Pairing needs at least 2 images")
    perm = np.random.default_rng([seed, stream, epoch]).permutation(n)
    half = n // 2
    return [(int(s), int(c)) for s, c in zip(perm[:half], perm[half: 2 * half])]


def make_pairs(images: torch.Tensor, seed: int, epoch: int = 0) -> Iterator[Tuple[torch.Tensor, torch.Tensor]]:
    """(secret, cover) images of one epoch, in `pair_indices` order."""
    for s, c in pair_indices(images.shape[0], seed, epoch):
        yield images[s], images[c]


def pair_tensors(images: torch.Tensor, seed: int, limit: Optional[int] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """Stacked (secrets, covers) for evaluation, first `limit` pairs of epoch 0."""
    pairs = list(islice(make_pairs(images, seed), limit))
    return torch.stack([s for s, _ in pairs]), torch.stack([c for _, c in pairs])


# ============================================
# Reports
# ============================================
def write_json(path: Path, payload: Union[BaseModel, Dict[str, Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = payload.model_dump_json(indent=2) if isinstance(payload, BaseModel) else json.dumps(payload, indent=2)
    path.write_text(text, encoding="utf8")
    return path


# ============================================
# Checkpoints
# ============================================
@dataclass
class Checkpoint:
    manifest: ShapeManifest
    state: Dict[str, torch.Tensor]
    alpha: float
    mask_seed: int
    init_seed: int
    step: int
    config: RunConfig
    optimizer_state: Optional[Dict[str, Any]] = None
    version: int = CHECKPOINT_FORMAT_VERSION

    @classmethod
    def capture(
        cls,
        model: MaskedBackbone,
        optimizer: Optional[torch.optim.Optimizer],
        step: int,
        config: RunConfig,
    ) -> "Checkpoint":
        return cls(
            manifest=model.manifest,
            state={k: v.detach().cpu().clone() for k, v in model.net.state_dict().items()},
            alpha=model.alpha,
            mask_seed=model.mask_seed,
            init_seed=model.init_seed,
            step=step,
            config=config,
            optimizer_state=optimizer.state_dict() if optimizer is not None else None,
        )

    def shared_weights(self) -> WeightSet:
        return WeightSet(
            manifest=self.manifest,
            tensors={n: self.state[n] for n in self.manifest.names},
            origin="trained",
        )


class _BlobWriter:
    def __init__(self):
        self.items: List[Tuple[str, bytes]] = []

    def add(self, tensor: torch.Tensor) -> Dict[str, Any]:
        arr = tensor.detach().cpu().contiguous().numpy()
        dtype_name = str(arr.dtype)
        if dtype_name not in _DTYPES:
            raise CheckpointError(f"Unsupported tensor dtype for checkpointing: {dtype_name}")
        member = f"blobs/{len(self.items):05d}.bin"
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        self.items.append((member, data))
        return {"dtype": dtype_name, "shape": list(arr.shape), "member": member}


def _read_blob(archive: zipfile.ZipFile, entry: Dict[str, Any]) -> torch.Tensor:
    dtype = np.dtype(_DTYPES[entry["dtype"]])
    arr = np.frombuffer(archive.read(entry["member"]), dtype=dtype.newbyteorder("<"))
    arr = arr.astype(dtype).reshape(entry["shape"])
    return torch.from_numpy(arr.copy())


@retry(
    stop=stop_after_attempt(3),
    wait=wait_exponential(multiplier=0.1, min=0.1, max=2),
    retry=retry_if_exception_type(OSError),
    reraise=True,
)
def _atomic_replace(src: str, dst: Path) -> None:
    os.replace(src, dst)


def save_checkpoint(path: Path, ckpt: Checkpoint) -> Path:
    """Write the archive to a temp file in the target folder, then rename over `path`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blobs = _BlobWriter()

    tensors = [{"name": name, **blobs.add(t)} for name, t in ckpt.state.items()]
    optimizer = None
    if ckpt.optimizer_state is not None:
        state = {}
        for pid, entries in ckpt.optimizer_state["state"].items():
            state[str(pid)] = {
                k: ({"tensor": blobs.add(v)} if torch.is_tensor(v) else {"value": v})
                for k, v in entries.items()
            }
        optimizer = {"state": state, "param_groups": ckpt.optimizer_state["param_groups"]}

    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": ckpt.version,
        "step": ckpt.step,
        "alpha": ckpt.alpha,
        "mask_seed": ckpt.mask_seed,
        "init_seed": ckpt.init_seed,
        "shape_manifest": ckpt.manifest.to_dict(),
        "config": ckpt.config.model_dump(mode="json"),
        "tensors": tensors,
        "optimizer": optimizer,
    }

    fd, tmp = tempfile.mkstemp(prefix=".tmp-", suffix=".ckpt", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as raw, zipfile.ZipFile(raw, "w", compression=zipfile.ZIP_STORED) as zf:
            zf.writestr("manifest.json", json.dumps(manifest, indent=2))
            for member, data in blobs.items:
                zf.writestr(member, data)
        _atomic_replace(tmp, path)
    except Exception:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    logger.info(f"Saved checkpoint at step {ckpt.step} to {path}")
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    """
    Read a checkpoint archive.

    Raises:
        CheckpointError: If the file is missing, not an archive or lacks fields
        CheckpointVersionError: If the format version is not supported
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path, "r") as zf:
            meta = json.loads(zf.read("manifest.json"))
            if meta.get("format") != CHECKPOINT_FORMAT:
                raise CheckpointError(f"{path} is not a keystego checkpoint")
            if meta.get("version") != CHECKPOINT_FORMAT_VERSION:
                raise CheckpointVersionError(
                    f"{path} has format version {meta.get('version')}, "
                    f"this build reads version {CHECKPOINT_FORMAT_VERSION}"
                )
            state = {t["name"]: _read_blob(zf, t) for t in meta["tensors"]}
            optimizer = None
            if meta.get("optimizer") is not None:
                opt_state = {}
                for pid, entries in meta["optimizer"]["state"].items():
                    opt_state[int(pid)] = {
                        k: _read_blob(zf, v["tensor"]) if "tensor" in v else v["value"]
                        for k, v in entries.items()
                    }
                optimizer = {"state": opt_state, "param_groups": meta["optimizer"]["param_groups"]}
            return Checkpoint(
                manifest=ShapeManifest.from_dict(meta["shape_manifest"]),
                state=state,
                alpha=float(meta["alpha"]),
                mask_seed=int(meta["mask_seed"]),
                init_seed=int(meta["init_seed"]),
                step=int(meta["step"]),
                config=RunConfig.model_validate(meta["config"]),
                optimizer_state=optimizer,
                version=int(meta["version"]),
            )
    except zipfile.BadZipFile as e:
        raise CheckpointError(f"{path} is not a valid checkpoint archive: {e}")
    except KeyError as e:
        raise CheckpointError(f"{path} is missing required field {e}")
    except ValidationError as e:
        raise CheckpointError(f"{path} carries an invalid config snapshot: {e}")


def restore_model(ckpt: Checkpoint, device: Union[str, torch.device] = "cpu") -> MaskedBackbone:
    """Rebuild the model: regenerate the mask, then load the shared weights exactly."""
    model = MaskedBackbone(ckpt.config.backbone, ckpt.alpha, ckpt.mask_seed, ckpt.init_seed)
    if model.manifest != ckpt.manifest:
        raise CheckpointError("Checkpoint shape manifest does not match its backbone config")
    dtype = next(iter(ckpt.state.values())).dtype
    model = model.to(dtype=dtype)
    model.net.load_state_dict(ckpt.state, strict=True)
    return model.to(device=torch.device(device)).eval()


def restore_optimizer(ckpt: Checkpoint, optimizer: torch.optim.Optimizer) -> None:
    if ckpt.optimizer_state is None:
        logger.warning("Checkpoint has no optimizer state; optimizer starts fresh")
        return
    optimizer.load_state_dict(ckpt.optimizer_state)
