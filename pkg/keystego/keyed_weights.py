"""
Sparse binary masks, key-seeded weight sets and their assembly.

Both random streams use numpy's Philox-4x64 counter-based generator with an
explicit 128-bit key, so results depend only on the arguments, not on call
order, process or platform:

    philox key = seed | (domain << 96) | (crc32(tensor_name) << 64)

`domain` keeps mask streams, key-seeded weights and the initial shared
weights apart: a key never reproduces W. Uniform doubles are the top 53
bits of each 64-bit Philox output scaled by 2**-53 (numpy's
`Generator.random`), so a key-seeded weight is `(2u - 1) * b` with
`b = sqrt(6 / (fan_in + fan_out))` (Glorot uniform).
"""
import logging
import math
import re
import zlib
from dataclasses import dataclass, field
from functools import lru_cache
from types import MappingProxyType
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

logger = logging.getLogger(__name__)

U64_LIMIT = 2**64
_MASK_DOMAIN = 0x4D41534B  # "MASK"
_WEIGHT_DOMAIN = 0x57474854  # "WGHT"
_INIT_DOMAIN = 0x494E4954  # "INIT"


class ParameterError(ValueError):
    """Raised when a numeric parameter (alpha, key, index) is out of range."""
    pass


class ShapeError(ValueError):
    """Raised when weight sets or masks disagree on their shape manifest."""
    pass


class KeyFormatError(ValueError):
    """Raised when a key string cannot be parsed as a 64-bit unsigned integer."""
    pass


# ============================================
# Shape manifest
# ============================================
@dataclass(frozen=True)
class TensorSpec:
    name: str
    dims: Tuple[int, ...]
    fan_in: int
    fan_out: int

    @property
    def size(self) -> int:
        return math.prod(self.dims)


@dataclass(frozen=True)
class ShapeManifest:
    """Ordered description of the maskable weight tensors of a network."""

    entries: Tuple[TensorSpec, ...]

    def __post_init__(self):
        seen = set()
        for spec in self.entries:
            if spec.name in seen:
                raise ShapeError(f"Duplicate tensor name in manifest: {spec.name}")
            seen.add(spec.name)
            if not spec.dims or any(d <= 0 for d in spec.dims):
                raise ShapeError(f"Tensor {spec.name} has invalid dims {spec.dims}")
            if spec.fan_in <= 0 or spec.fan_out <= 0:
                raise ShapeError(f"Tensor {spec.name} has non-positive fan values")
            if len(spec.dims) >= 2:
                receptive = math.prod(spec.dims[2:])
                if spec.fan_in != spec.dims[1] * receptive or spec.fan_out != spec.dims[0] * receptive:
                    raise ShapeError(
                        f"Tensor {spec.name}: fan_in/fan_out ({spec.fan_in}, {spec.fan_out}) "
                        f"inconsistent with dims {spec.dims}"
                    )

    def __iter__(self) -> Iterator[TensorSpec]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(spec.name for spec in self.entries)

    @property
    def total_size(self) -> int:
        return sum(spec.size for spec in self.entries)

    def to_dict(self) -> List[Dict]:
        return [
            {"name": s.name, "dims": list(s.dims), "fan_in": s.fan_in, "fan_out": s.fan_out}
            for s in self.entries
        ]

    @classmethod
    def from_dict(cls, items: Iterable[Mapping]) -> "ShapeManifest":
        return cls(tuple(
            TensorSpec(str(it["name"]), tuple(int(d) for d in it["dims"]), int(it["fan_in"]), int(it["fan_out"]))
            for it in items
        ))

    @classmethod
    def from_shapes(cls, shapes: Iterable[Tuple[str, Sequence[int]]]) -> "ShapeManifest":
        """Build a manifest from (name, dims) pairs with conv/affine fan rules."""
        entries = []
        for name, dims in shapes:
            dims = tuple(int(d) for d in dims)
            if len(dims) >= 2:
                receptive = math.prod(dims[2:])
                fan_in, fan_out = dims[1] * receptive, dims[0] * receptive
            else:
                fan_in = fan_out = dims[0]
            entries.append(TensorSpec(name, dims, fan_in, fan_out))
        return cls(tuple(entries))


def _philox(seed: int, domain: int, name: str) -> np.random.Generator:
    key = (int(seed) & (U64_LIMIT - 1)) | (zlib.crc32(name.encode("utf8")) << 64) | (domain << 96)
    return np.random.Generator(np.random.Philox(key=key))


def _check_u64(value: int, what: str) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise ParameterError(f"{what} must be an integer, got {type(value).__name__}")
    value = int(value)
    if not 0 <= value < U64_LIMIT:
        raise ParameterError(f"{what} must be a 64-bit unsigned integer")
    return value


# ============================================
# Binary mask
# ============================================
@dataclass(frozen=True, eq=False)
class BinaryMask:
    """M = 1 marks the shared, trainable region; `alpha` is its fraction per tensor."""

    manifest: ShapeManifest
    alpha: float
    seed: int
    bits: Mapping[str, torch.Tensor] = field(repr=False)

    def complement(self) -> Dict[str, torch.Tensor]:
        return {name: ~b for name, b in self.bits.items()}

    def ones(self, name: str) -> int:
        return int(self.bits[name].sum().item())

    def equal(self, other: "BinaryMask") -> bool:
        return (
            self.manifest == other.manifest
            and all(torch.equal(self.bits[n], other.bits[n]) for n in self.manifest.names)
        )


def mask_count(alpha: float, size: int) -> int:
    """round(alpha * size), rounding halves up."""
    return int(math.floor(alpha * size + 0.5))


def sample_mask(manifest: ShapeManifest, alpha: float, seed: int) -> BinaryMask:
    """
    Sample a per-tensor mask with exactly round(alpha * size) ones.

    The ones are placed by a Philox-driven permutation of the positions, so
    the same (manifest, alpha, seed) always yields the same bits.

    Raises:
        ParameterError: If alpha is outside (0, 1] or seed is not a u64
    """
    if not (isinstance(alpha, (int, float)) and 0.0 < float(alpha) <= 1.0):
        raise ParameterError(f"alpha must lie in (0, 1], got {alpha}")
    alpha = float(alpha)
    seed = _check_u64(seed, "mask seed")

    bits = {}
    for spec in manifest:
        n = spec.size
        ones = mask_count(alpha, n)
        order = _philox(seed, _MASK_DOMAIN, spec.name).permutation(n)
        flat = order < ones
        bits[spec.name] = torch.from_numpy(flat.reshape(spec.dims).copy())
    return BinaryMask(manifest=manifest, alpha=alpha, seed=seed, bits=MappingProxyType(bits))


# ============================================
# Weight sets
# ============================================
@dataclass(frozen=True, eq=False)
class WeightSet:
    """Per-tensor real arrays matching a manifest, tagged with where they came from."""

    manifest: ShapeManifest
    tensors: Mapping[str, torch.Tensor] = field(repr=False)
    origin: str = "trained"
    key: Optional[int] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if set(self.tensors) != set(self.manifest.names):
            raise ShapeError("WeightSet tensors do not match the manifest names")
        for spec in self.manifest:
            t = self.tensors[spec.name]
            if tuple(t.shape) != spec.dims:
                raise ShapeError(f"Tensor {spec.name} has shape {tuple(t.shape)}, expected {spec.dims}")
            if not bool(torch.isfinite(t).all()):
                raise ShapeError(f"Tensor {spec.name} contains non-finite values")

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def to(self, dtype: torch.dtype, device: Optional[torch.device] = None) -> Dict[str, torch.Tensor]:
        return {n: t.to(dtype=dtype, device=device) for n, t in self.tensors.items()}

    def equal(self, other: "WeightSet") -> bool:
        return self.manifest == other.manifest and all(
            torch.equal(self.tensors[n], other.tensors[n]) for n in self.manifest.names
        )


def glorot_bound(spec: TensorSpec) -> float:
    return math.sqrt(6.0 / (spec.fan_in + spec.fan_out))


def _glorot_tensors(seed: int, domain: int, manifest: ShapeManifest) -> Mapping[str, torch.Tensor]:
    tensors = {}
    for spec in manifest:
        b = glorot_bound(spec)
        u = _philox(seed, domain, spec.name).random(spec.size, dtype=np.float64)
        w = (2.0 * u - 1.0) * b
        tensors[spec.name] = torch.from_numpy(w.reshape(spec.dims))
    return MappingProxyType(tensors)


def generate_key_weights(key: int, manifest: ShapeManifest) -> WeightSet:
    """Glorot-uniform weights for every manifest tensor, seeded by `key` (float64)."""
    key = _check_u64(key, "key")
    return WeightSet(manifest=manifest, tensors=_glorot_tensors(key, _WEIGHT_DOMAIN, manifest),
                     origin="key_seeded", key=key)


def initial_weights(init_seed: int, manifest: ShapeManifest) -> WeightSet:
    """Glorot-uniform starting point for W; drawn from its own stream, disjoint from every key."""
    init_seed = _check_u64(init_seed, "init_seed")
    return WeightSet(manifest=manifest, tensors=_glorot_tensors(init_seed, _INIT_DOMAIN, manifest),
                     origin="initial")


@lru_cache(maxsize=64)
def cached_key_weights(key: int, manifest: ShapeManifest) -> WeightSet:
    """Memoized `generate_key_weights`; WeightSets are immutable so sharing is safe."""
    return generate_key_weights(key, manifest)


def assemble_tensors(
    shared: Mapping[str, torch.Tensor],
    bits: Mapping[str, torch.Tensor],
    fill: Optional[Mapping[str, torch.Tensor]],
) -> Dict[str, torch.Tensor]:
    """
    Elementwise shared*M + fill*(1-M) for each masked tensor.

    `fill=None` means the shared tensors fill their own complement. Works on
    tensors that require grad; the fill is cast to the shared dtype/device.
    """
    out = {}
    for name, w in shared.items():
        if fill is None:
            out[name] = w
            continue
        m = bits[name].to(device=w.device)
        f = fill[name].to(dtype=w.dtype, device=w.device)
        out[name] = torch.where(m, w, f)
    return out


def assemble(shared: WeightSet, mask: BinaryMask, fill: WeightSet) -> WeightSet:
    """
    Effective weights W*M + W_fill*(1-M).

    Raises:
        ShapeError: If the three inputs do not share one manifest
    """
    if not (shared.manifest == mask.manifest == fill.manifest):
        raise ShapeError("assemble: shared, mask and fill disagree on the manifest")
    tensors = assemble_tensors(shared.tensors, mask.bits, fill.tensors)
    return WeightSet(
        manifest=shared.manifest,
        tensors=MappingProxyType({n: t.detach() for n, t in tensors.items()}),
        origin=f"assembled[{shared.origin}|{fill.origin}]",
    )


# ============================================
# Keys
# ============================================
@dataclass(frozen=True)
class KeyPair:
    k_embed: int = field(repr=False)
    k_recover: int = field(repr=False)
    index: int = 1

    def __post_init__(self):
        _check_u64(self.k_embed, "embed key")
        _check_u64(self.k_recover, "recover key")
        if self.index < 1:
            raise ParameterError(f"key index must be >= 1, got {self.index}")


class KeyRegistry:
    """The K registered key pairs, indexed 1..K."""

    def __init__(self, pairs: Sequence[KeyPair]):
        pairs = tuple(pairs)
        if not pairs:
            raise ParameterError("A key registry needs at least one key pair")
        if [p.index for p in pairs] != list(range(1, len(pairs) + 1)):
            raise ParameterError("Key pair indices must be 1..K in order")
        values = [v for p in pairs for v in (p.k_embed, p.k_recover)]
        if len(set(values)) != len(values):
            raise ParameterError("All 2K registered key values must be distinct")
        self._pairs = pairs

    def __len__(self) -> int:
        return len(self._pairs)

    def __repr__(self) -> str:
        return f"KeyRegistry(K={len(self)})"

    @property
    def indices(self) -> range:
        return range(1, len(self._pairs) + 1)

    def pair(self, index: int) -> KeyPair:
        if not 1 <= index <= len(self._pairs):
            raise ParameterError(f"Unknown key index {index} (registry has K={len(self)})")
        return self._pairs[index - 1]

    def contains(self, key: int) -> bool:
        return any(key in (p.k_embed, p.k_recover) for p in self._pairs)

    def embed_fill(self, index: int, manifest: ShapeManifest) -> WeightSet:
        return cached_key_weights(self.pair(index).k_embed, manifest)

    def recover_fill(self, index: int, manifest: ShapeManifest) -> WeightSet:
        return cached_key_weights(self.pair(index).k_recover, manifest)

    @classmethod
    def from_values(cls, values: Sequence[Tuple[int, int]]) -> "KeyRegistry":
        return cls([KeyPair(e, r, i) for i, (e, r) in enumerate(values, start=1)])

    @classmethod
    def random(cls, num_keys: int, seed: int) -> "KeyRegistry":
        """Deterministic registry for experiments (sweeps, tests); keys come from `seed`."""
        rng = np.random.default_rng(seed)
        values: List[int] = []
        while len(values) < 2 * num_keys:
            v = int(rng.integers(0, U64_LIMIT, dtype=np.uint64))
            if v not in values:
                values.append(v)
        return cls.from_values(list(zip(values[0::2], values[1::2])))


_KEY_RE = re.compile(r"^(0[xX][0-9a-fA-F]+|[0-9]+)$")


def parse_key(text: str) -> int:
    """Parse a decimal or 0x-hex 64-bit key. The message never echoes the input."""
    text = text.strip()
    if not _KEY_RE.match(text):
        raise KeyFormatError("Key must be a decimal or 0x-prefixed hexadecimal integer")
    value = int(text, 16) if text.lower().startswith("0x") else int(text)
    if value >= U64_LIMIT:
        raise KeyFormatError("Key does not fit in 64 bits")
    return value


def parse_key_pairs(text: str) -> KeyRegistry:
    """Parse 'embed:recover,embed:recover,...' into a registry."""
    values = []
    for n, chunk in enumerate(c for c in text.split(",") if c.strip()):
        parts = chunk.split(":")
        if len(parts) != 2:
            raise KeyFormatError(f"Key pair #{n + 1} must look like embed:recover")
        values.append((parse_key(parts[0]), parse_key(parts[1])))
    if not values:
        raise KeyFormatError("No key pairs given")
    try:
        return KeyRegistry.from_values(values)
    except ParameterError as e:
        raise KeyFormatError(str(e)) from e
