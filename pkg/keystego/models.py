"""
Pydantic models: run configuration sections and the report schemas written to disk.
"""
import json
import math
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator

RUN_CONFIG_SCHEMA_VERSION = 1
U64_MAX = 2**64 - 1


# ============================================
# Run configuration
# ============================================
class BackboneConfig(BaseModel):
    width: int = Field(default=32, ge=1, description="channels of the first stage")
    depth: int = Field(default=3, ge=0, description="number of down/up stages")
    input_slots: Literal[2] = 2
    activation: Literal["relu", "leaky_relu", "gelu", "tanh"] = "leaky_relu"
    use_norm: bool = True
    side: int = Field(default=64, ge=1)

    @property
    def in_channels(self) -> int:
        return 3 * self.input_slots


class LossWeights(BaseModel):
    lambda_e: float = Field(default=1.0, ge=0.0)
    lambda_r: float = Field(default=0.75, ge=0.0)
    lambda_p: float = Field(default=0.25, ge=0.0)
    lambda_m: float = Field(default=0.5, ge=0.0)


class TrainConfig(BaseModel):
    """Optimization settings. Key values are not part of it: they arrive at run time."""

    num_keys: int = Field(default=3, ge=1)
    alpha: float = Field(default=0.7, gt=0.0, le=1.0)
    mask_seed: int = Field(default=20240917, ge=0, le=U64_MAX)
    init_seed: int = Field(default=1, ge=0, le=U64_MAX)
    data_seed: int = Field(default=0, ge=0)
    learning_rate: float = Field(default=1e-4, gt=0.0)
    batch_size: int = Field(default=8, ge=1)
    steps: int = Field(default=5000, ge=0)
    noise_sigma_range: Tuple[float, float] = (0.0, 0.1)
    mismatch_policy: Literal["sampled", "exhaustive"] = "sampled"
    eval_every: int = Field(default=500, ge=0)
    eval_samples: int = Field(default=32, ge=1)
    checkpoint_every: int = Field(default=1000, ge=0)
    log_every: int = Field(default=10, ge=1)
    dtype: Literal["float32", "float64"] = "float32"

    @field_validator("noise_sigma_range")
    @classmethod
    def validate_sigma_range(cls, v: Tuple[float, float]) -> Tuple[float, float]:
        lo, hi = v
        if not (0.0 <= lo <= hi < 1.0):
            raise ValueError(f"noise_sigma_range must satisfy 0 <= lo <= hi < 1, got {v}")
        return v


class DatasetSpec(BaseModel):
    root: str = "desk"
    split: Literal["train", "val", "test"] = "train"
    side: int = Field(default=64, ge=1)
    pairing_seed: int = Field(default=0, ge=0)
    max_images: Optional[int] = Field(default=None, ge=2)

    def for_split(self, split: str) -> "DatasetSpec":
        return self.model_copy(update={"split": split})


class RunConfig(BaseModel):
    schema_version: Literal[1] = RUN_CONFIG_SCHEMA_VERSION
    run_name: str = "desk"
    output_dir: Optional[str] = None
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    loss: LossWeights = Field(default_factory=LossWeights)
    train: TrainConfig = Field(default_factory=TrainConfig)
    data: DatasetSpec = Field(default_factory=DatasetSpec)
    eval_split: Literal["val", "test"] = "val"

    @model_validator(mode="after")
    def check_sides(self) -> "RunConfig":
        if self.backbone.side != self.data.side:
            raise ValueError(
                f"backbone.side ({self.backbone.side}) must equal data.side ({self.data.side})"
            )
        return self

    @classmethod
    def from_file(cls, path: Optional[Path], overrides: Sequence[str] = ()) -> "RunConfig":
        """
        Load a JSON run config and apply `section.field=value` overrides.
        Values are parsed as JSON when possible, otherwise taken as strings.
        """
        raw: Dict[str, Any] = {}
        if path is not None:
            with Path(path).open("r", encoding="utf8") as f:
                raw = json.load(f)
        return cls.from_dict(raw, overrides)

    @classmethod
    def from_dict(cls, raw: Dict[str, Any], overrides: Sequence[str] = ()) -> "RunConfig":
        raw = json.loads(json.dumps(raw))
        for item in overrides:
            _apply_override(raw, item)
        return cls.model_validate(raw)

    def to_json(self) -> str:
        return self.model_dump_json(indent=2)


def _apply_override(raw: Dict[str, Any], item: str) -> None:
    if "=" not in item:
        raise ValueError(f"Override '{item}' is not of the form section.field=value")
    dotted, value = item.split("=", 1)
    parts = [p for p in dotted.strip().split(".") if p]
    if not parts:
        raise ValueError(f"Override '{item}' has an empty key")
    try:
        parsed: Any = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    node = raw
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ValueError(f"Override '{item}' descends into a non-section value")
    node[parts[-1]] = parsed


# ============================================
# Reports
# ============================================
class MetricTriple(BaseModel):
    psnr: float
    ssim: float = Field(ge=-1.0, le=1.0)
    mae: float = Field(ge=0.0)

    @classmethod
    def mean(cls, triples: Sequence["MetricTriple"]) -> "MetricTriple":
        if not triples:
            raise ValueError("Cannot average an empty list of metrics")
        n = len(triples)
        return cls(
            psnr=math.fsum(t.psnr for t in triples) / n,
            ssim=math.fsum(t.ssim for t in triples) / n,
            mae=math.fsum(t.mae for t in triples) / n,
        )


class KeyBreakdown(BaseModel):
    key_index: int = Field(ge=1)
    imperceptibility: MetricTriple
    recoverability: MetricTriple
    cross_decoding: Optional[MetricTriple] = None


class EvalReport(BaseModel):
    imperceptibility: MetricTriple
    recoverability: MetricTriple
    cross_decoding: Optional[MetricTriple] = None
    per_key: List[KeyBreakdown]
    sample_count: int = Field(gt=0)
    # fraction of mismatched recoveries closer (MAE) to the cover than to the secret
    cover_regression_rate: Optional[float] = None
    config: Optional[Dict[str, Any]] = None


class CrossKeyMatrix(BaseModel):
    """Rows are encoding keys, columns decoding keys (1-based in reports, 0-based in cells)."""

    cells: List[List[MetricTriple]]
    sample_count: int = Field(gt=0)
    config: Optional[Dict[str, Any]] = None

    @field_validator("cells")
    @classmethod
    def validate_square(cls, v: List[List[MetricTriple]]) -> List[List[MetricTriple]]:
        if not v or any(len(row) != len(v) for row in v):
            raise ValueError("CrossKeyMatrix must be a non-empty square grid")
        return v

    @property
    def size(self) -> int:
        return len(self.cells)

    def psnr_grid(self) -> List[List[float]]:
        return [[c.psnr for c in row] for row in self.cells]

    def diagonal_margin_db(self) -> Optional[float]:
        """min(diagonal PSNR) - max(off-diagonal PSNR); None when K == 1."""
        if self.size == 1:
            return None
        diag = [self.cells[i][i].psnr for i in range(self.size)]
        off = [
            self.cells[i][j].psnr
            for i in range(self.size)
            for j in range(self.size)
            if i != j
        ]
        return min(diag) - max(off)

    def rows_diagonal_dominant(self) -> bool:
        return all(
            self.cells[i][i].psnr > self.cells[i][j].psnr
            for i in range(self.size)
            for j in range(self.size)
            if i != j
        )


class StepReport(BaseModel):
    step: int = Field(ge=0)
    emb: float
    rec: float
    pur: float
    mki: float
    total: float
    wall_time: float = Field(ge=0.0)


class ProbeReport(BaseModel):
    n_random: int = Field(ge=1)
    sample_count: int = Field(gt=0)
    vs_secret: MetricTriple
    vs_cover: MetricTriple
    mismatched_vs_secret: Optional[MetricTriple] = None
    max_ssim_vs_secret: float
    grid_path: Optional[str] = None
    config: Optional[Dict[str, Any]] = None


class PcaCondition(BaseModel):
    encode_key: int = Field(ge=1)
    decode_key: int = Field(ge=1)
    matched: bool
    points: List[Tuple[float, float]]


class PcaResult(BaseModel):
    conditions: List[PcaCondition]
    separation_score: float
    matched_vs_mismatched_score: float
    explained_variance_ratio: Tuple[float, float]
    config: Optional[Dict[str, Any]] = None


class PurificationReport(BaseModel):
    sigma: float = Field(ge=0.0)
    noisy_vs_clean: MetricTriple
    purified_vs_clean: MetricTriple
    gain_db: float
    sample_count: int = Field(gt=0)
