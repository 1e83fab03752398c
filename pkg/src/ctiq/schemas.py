"""Pydantic request/response models: the wire format of the service and
the CLI's configuration surface (one request model per subcommand)."""

from __future__ import annotations

from pydantic import BaseModel, ConfigDict, Field


class _Request(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GenDataRequest(_Request):
    out: str
    count: int = 500
    height: int = 32
    width: int = 32
    seed: int = 0
    mos_noise: float = 0.0
    workers: int = 1
    name: str = "dataset.ctds"


class GenDataResponse(BaseModel):
    dataset: str
    count: int
    sha256: str
    manifest: str


class TrainMetricRequest(_Request):
    datasets: list[str]
    out: str
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    name: str = "metric.ctiq"


class HistoryRow(BaseModel):
    epoch: int
    mse: float
    rank: float | None = None
    targ: float | None = None
    total: float | None = None
    val_srocc: float | None = None


class TrainMetricResponse(BaseModel):
    model: str
    history_csv: str
    best_val_srocc: float
    epochs: int
    manifest: str


class TrainDenoiserRequest(_Request):
    datasets: list[str]
    out: str
    mode: str = "mse_only"  # mse_only | composite
    sigma: float = 0.18
    epochs: int | None = None  # default 30 (mse_only) / 50 (composite)
    lr: float | None = None  # default 1e-3 (mse_only) / 1e-4 (composite)
    batch_size: int = 15
    c_r: float = 1.0
    c_t: float = 1000.0
    metric: str | None = None  # required in composite mode
    init_from: str | None = None  # composite fine-tuning starts from these weights
    seed: int = 0
    name: str = "denoiser.ctiq"


class TrainDenoiserResponse(BaseModel):
    model: str
    history_csv: str
    mode: str
    epochs: int
    best_val_srocc: float | None
    manifest: str


class CertifyRequest(_Request):
    dataset: str
    metric: str
    out: str
    denoiser: str | None = None
    split: str = "test"
    limit: int | None = None
    preset: str | None = None  # weak | strong; overrides sigma/epsilon
    sigma: float = 0.18
    epsilon: float = 0.36
    n: int = 2000
    seed: int = 0
    chunk_size: int = 16
    workers: int = 1
    name: str = "certify.json"


class CertRecord(BaseModel):
    image_id: int
    sigma: float
    epsilon: float
    n: int
    median: float
    lower: float
    upper: float
    cd_pct: float
    seed: int


class CertifyResponse(BaseModel):
    records: list[CertRecord]
    mean_cd_pct: float
    records_json: str
    manifest: str


class AttackRequest(_Request):
    dataset: str
    metric: str
    out: str
    dms: str | None = None
    dms_iqa: str | None = None
    defenses: list[str] = Field(default_factory=lambda: ["none", "ms", "dms", "dms_iqa"])
    split: str = "all"
    limit: int | None = None
    preset: str | None = None  # sets sigma and both epsilons
    eps: float = 0.36  # attack budget
    steps: int = 1000
    attack_lr: float = 0.0005
    sigma: float = 0.18
    cert_epsilon: float | None = None  # defaults to eps
    n: int = 2000
    seed: int = 0
    chunk_size: int = 16
    workers: int = 1
    name: str = "attack.json"


class AttackAggregate(BaseModel):
    defense: str
    eps: float
    n_images: int
    mean_adv_gain: float
    mean_abs_adv_gain: float
    mean_cd_l: float | None
    mean_cd_u: float | None
    all_contained: bool


class AttackResponse(BaseModel):
    aggregates: list[AttackAggregate]
    records_json: str
    manifest: str


class EvalCompareRequest(_Request):
    dataset: str
    metric: str
    dms: str
    dms_iqa: str
    out: str
    split: str = "test"
    limit: int | None = None
    presets: list[str] = Field(default_factory=lambda: ["weak", "strong"])
    n: int = 2000
    seed: int = 0
    chunk_size: int = 16
    workers: int = 1


class CompareRow(BaseModel):
    method: str
    preset: str
    sigma: float
    epsilon: float
    srocc: float
    plcc: float
    tau_srocc: float
    tau_plcc: float
    mean_cd_pct: float | None


class EvalCompareResponse(BaseModel):
    rows: list[CompareRow]
    table_csv: str
    table_txt: str
    records_json: str
    manifest: str


class OptimizeRequest(_Request):
    dataset: str
    metric: str
    out: str
    denoiser: str | None = None
    backends: list[str] = Field(default_factory=lambda: ["dms_iqa"])
    split: str = "test"
    limit: int = 20
    noise_sigma: float = 0.1
    sigma: float = 0.18
    steps: int = 1000
    lr: float = 1e-5
    n: int = 100
    seed: int = 0
    quality_weight: float = 1.0
    log_every: int = 50
    chunk_size: int = 20


class OptimizeBackendSummary(BaseModel):
    backend: str
    mean_final_rmse: float
    mean_start_rmse: float
    images: int
    trajectory_csv: str
    images_ctds: str


class OptimizeResponse(BaseModel):
    summaries: list[OptimizeBackendSummary]
    manifest: str


class SweepRequest(_Request):
    grid: str  # loss | batch | eps-sigma
    dataset: str
    metric: str
    out: str
    init_from: str | None = None  # base denoiser for loss/batch grids
    denoiser: str | None = None  # applied denoiser for eps-sigma grid
    c_r_values: list[float] = Field(default_factory=lambda: [1.0, 1000.0])
    c_t_values: list[float] = Field(default_factory=lambda: [1.0, 1000.0])
    c_r: float = 1.0  # fixed weights for the batch grid
    c_t: float = 1000.0
    batch_values: list[int] = Field(default_factory=lambda: [3, 15])
    sigmas: list[float] = Field(default_factory=lambda: [0.12, 0.18])
    epsilons: list[float] = Field(default_factory=lambda: [0.06, 0.36])
    sigma: float = 0.18
    epochs: int = 5
    lr: float = 1e-4
    batch_size: int = 15
    n: int = 200
    seed: int = 0
    limit: int | None = None
    chunk_size: int = 16
    workers: int = 1
    name: str = "sweep.csv"


class SweepResponse(BaseModel):
    rows: list[dict]
    sweep_csv: str
    manifest: str


class FeasibilityResponse(BaseModel):
    sigma: float
    epsilon: float
    n: int
    feasible: bool
    max_ratio: float
    min_samples: int


class PresetInfo(BaseModel):
    name: str
    sigma: float
    epsilon: float


class HealthResponse(BaseModel):
    status: str
    version: str
