import math
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .config import (
    DEFAULT_BASIC_SIGMA,
    DEFAULT_BATCH_SIZE,
    DEFAULT_CHANNELS,
    DEFAULT_EPOCHS,
    DEFAULT_KERNEL,
    DEFAULT_LATENT_DIM,
    DEFAULT_LEARNING_RATE,
    DEFAULT_OUT_DIR,
    DEFAULT_SEED,
    DEFAULT_SIMPLE_SIGMA,
    IMAGE_SIZE,
    LEAKY_SLOPE,
    unflatten,
)
from .errors import ConfigError

Label = Literal["id", "ood"]


def _split_list(value: Any) -> Any:
    if isinstance(value, str):
        return [part.strip() for part in value.split(",") if part.strip()]
    return value


def validation_message(exc: ValidationError) -> str:
    """Collapse a pydantic error into one line."""
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "config"
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


# Model records


class PriorSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    sigma: float = Field(..., gt=0, description="Standard deviation of the zero-mean isotropic prior")
    role: Literal["basic", "simple"] = "basic"


class SyntheticSpec(BaseModel):
    kind: Literal["blobs", "stripes", "noise-texture"]
    complexity: float = Field(..., ge=0.0, le=1.0)
    count: int = Field(..., ge=1)
    seed: int = 0


class Architecture(BaseModel):
    model_config = ConfigDict(extra="forbid")

    image_size: int = IMAGE_SIZE
    latent_dim: int = Field(DEFAULT_LATENT_DIM, ge=1)
    channels: Tuple[int, int] = DEFAULT_CHANNELS
    kernel: int = Field(DEFAULT_KERNEL, ge=1)
    slope: float = Field(LEAKY_SLOPE, ge=0.0)

    @field_validator("channels", mode="before")
    @classmethod
    def parse_channels(cls, v: Any) -> Any:
        return _split_list(v)

    @field_validator("image_size")
    @classmethod
    def divisible_by_four(cls, v: int) -> int:
        if v < 4 or v % 4:
            raise ValueError("image_size must be a positive multiple of 4")
        return v


# Run configuration


class PriorsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    basic_sigma: float = Field(DEFAULT_BASIC_SIGMA, gt=0)
    simple_sigmas: List[float] = Field(default_factory=lambda: [DEFAULT_SIMPLE_SIGMA])
    simple_branch_prior: Literal["simple", "basic"] = "simple"

    @field_validator("simple_sigmas", mode="before")
    @classmethod
    def parse_sigmas(cls, v: Any) -> Any:
        return _split_list(v)

    @field_validator("simple_sigmas")
    @classmethod
    def positive(cls, v: List[float]) -> List[float]:
        if any(not s > 0 for s in v):
            raise ValueError("every simple sigma must be positive")
        return v


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(DEFAULT_EPOCHS, ge=0)
    batch_size: int = Field(DEFAULT_BATCH_SIZE, ge=1)
    learning_rate: float = Field(DEFAULT_LEARNING_RATE, gt=0)
    seed: int = DEFAULT_SEED


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mode: Literal["vae", "bpvae"] = "bpvae"
    basic: str = Field(..., min_length=1, description="Basic dataset reference")
    simples: List[str] = Field(default_factory=list)
    priors: PriorsConfig = Field(default_factory=PriorsConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    model: Architecture = Field(default_factory=Architecture)
    output_dir: str = DEFAULT_OUT_DIR
    limit: Optional[int] = Field(None, ge=1)

    @field_validator("simples", mode="before")
    @classmethod
    def parse_simples(cls, v: Any) -> Any:
        return _split_list(v)

    @model_validator(mode="after")
    def check_priors(self) -> "RunConfig":
        if self.mode == "vae":
            if self.simples:
                raise ValueError("mode=vae takes no simple datasets")
            return self
        if not self.simples:
            raise ValueError("mode=bpvae requires at least one simple dataset")
        sigmas = self.priors.simple_sigmas
        if len(sigmas) == 1 and len(self.simples) > 1:
            self.priors.simple_sigmas = sigmas * len(self.simples)
        elif len(sigmas) != len(self.simples):
            raise ValueError(
                f"{len(sigmas)} simple sigmas given for {len(self.simples)} simple datasets"
            )
        for sigma in self.priors.simple_sigmas:
            if not sigma < self.priors.basic_sigma:
                raise ValueError(
                    f"simple sigma {sigma} must be smaller than basic sigma {self.priors.basic_sigma}"
                )
        return self

    @classmethod
    def from_flat(cls, values: Dict[str, Any]) -> "RunConfig":
        try:
            return cls.model_validate(unflatten(values))
        except ValidationError as e:
            raise ConfigError(validation_message(e)) from None

    def simple_priors(self) -> List[PriorSpec]:
        if self.mode == "vae":
            return []
        return [PriorSpec(sigma=s, role="simple") for s in self.priors.simple_sigmas]

    def basic_prior(self) -> PriorSpec:
        return PriorSpec(sigma=self.priors.basic_sigma, role="basic")


def flat_keys(model_cls: type = RunConfig, prefix: str = "") -> List[str]:
    """Dotted keys accepted in config files and as CLI flags."""
    keys: List[str] = []
    for name, info in model_cls.model_fields.items():
        annotation = info.annotation
        if isinstance(annotation, type) and issubclass(annotation, BaseModel):
            keys.extend(flat_keys(annotation, f"{prefix}{name}."))
        else:
            keys.append(f"{prefix}{name}")
    return keys


# Evaluation records


class ScoreEntry(BaseModel):
    score: float
    label: Label
    dataset_name: str


class ScoreSet(BaseModel):
    entries: List[ScoreEntry] = Field(..., min_length=1)

    @field_validator("entries")
    @classmethod
    def finite_scores(cls, v: List[ScoreEntry]) -> List[ScoreEntry]:
        for entry in v:
            if not math.isfinite(entry.score):
                raise ValueError(f"non-finite score in dataset {entry.dataset_name!r}")
        return v

    @classmethod
    def from_scores(cls, scores: Any, label: Label, dataset_name: str) -> "ScoreSet":
        return cls(
            entries=[ScoreEntry(score=float(s), label=label, dataset_name=dataset_name) for s in scores]
        )

    @classmethod
    def merge(cls, *sets: "ScoreSet") -> "ScoreSet":
        return cls(entries=[e for s in sets for e in s.entries])

    def scores(self, label: Optional[Label] = None) -> np.ndarray:
        return np.array(
            [e.score for e in self.entries if label is None or e.label == label], dtype=np.float64
        )

    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries])

    def dataset_names(self) -> List[str]:
        names: List[str] = []
        for e in self.entries:
            if e.dataset_name not in names:
                names.append(e.dataset_name)
        return names

    def for_dataset(self, name: str) -> "ScoreSet":
        return ScoreSet(entries=[e for e in self.entries if e.dataset_name == name])

    def with_label(self, label: Label) -> "ScoreSet":
        return ScoreSet(entries=[e.model_copy(update={"label": label}) for e in self.entries])


class HistogramBin(BaseModel):
    bin_left: float
    bin_right: float
    count: int = Field(..., ge=0)


class JointHistogramRow(HistogramBin):
    dataset: str


class MetricsReport(BaseModel):
    mse: Optional[float] = Field(None, ge=0)
    psnr_db: Optional[float] = None
    ssim: Optional[float] = Field(None, ge=-1.0, le=1.0)
    auroc: Optional[float] = Field(None, ge=0.0, le=1.0)
    auprc: Optional[float] = Field(None, ge=0.0, le=1.0)
    histogram: List[HistogramBin] = Field(default_factory=list)


class ScoreSummary(BaseModel):
    dataset: str
    count: int
    mean_elbo: float
    median_elbo: float
    std_elbo: float


class LikelihoodRatioReport(BaseModel):
    train_dataset: str
    test_dataset: str
    train_mean_elbo: float
    test_mean_elbo: float
    difference: float = Field(..., description="test mean ELBO minus train mean ELBO")
    neg_elbo_ratio: float = Field(..., description="mean(-ELBO test) / mean(-ELBO train)")
    flagged: bool = Field(..., description="ratio < 1: test samples more likely than training samples")


class SelectionVerdict(BaseModel):
    candidate: str
    statistic: Literal["mean", "median"] = "mean"
    basic_self_elbo: Optional[float] = None
    candidate_self_elbo: Optional[float] = None
    verdict: Literal["simple", "not-simple", "indeterminate"]
    reason: Optional[str] = None


# Command results


class TrainReport(BaseModel):
    checkpoint: str
    loss_csv: str
    epochs: int
    final_loss: Optional[float]
    sha256: str


class DetectReport(BaseModel):
    metrics_csv: str
    histogram_csv: str
    scores_csv: str
    auroc: float
    auprc: float
    mean_elbo_id: float
    mean_elbo_ood: float


class ReconstructReport(BaseModel):
    metrics_csv: str
    image_dir: str
    count: int
    metrics: MetricsReport


class SelectReport(BaseModel):
    verdict_csv: str
    verdicts: List[SelectionVerdict]


class SummaryReport(BaseModel):
    summary_csv: str
    histogram_csv: str
    ratio_csv: Optional[str] = None
    summaries: List[ScoreSummary]
    ratios: List[LikelihoodRatioReport] = Field(default_factory=list)


class SampleReport(BaseModel):
    image_dir: str
    count: int
    prior: PriorSpec
