import threading
import tomllib
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, Field, ValidationError, model_validator

from app.exceptions import ConfigError
from app.schema import ALLOWED_BITS, LoraSite, Pipeline


def get_project_root() -> Path:
    """Get the project root directory"""
    return Path(__file__).resolve().parent.parent


PROJECT_ROOT = get_project_root()


class ModelConfig(BaseModel):
    """Shape of the split ViT and where the LoRA pair sits in each block."""

    E: int = Field(4, description="Transformer block count")
    D: int = Field(16, description="Embedding dimension")
    M: int = Field(9, description="Patch-token count")
    H: int = Field(1, description="Attention head count")
    r: int = Field(4, description="LoRA rank")
    C: int = Field(4, description="Class count")
    e: int = Field(2, description="Cut layer: blocks 1..e run on the device")
    patch_dim: int = Field(16, description="Feature size of one input patch")
    lora_site: LoraSite = Field(LoraSite.QUERY, description="Adapted projection")
    lora_scale: float = Field(1.0, description="Multiplier on U @ V")
    init_std: float = Field(0.02, description="Std of the Gaussian backbone init")
    ln_eps: float = Field(1e-6, description="LayerNorm epsilon")

    class Config:
        extra = "forbid"

    @model_validator(mode="after")
    def check_dims(self) -> "ModelConfig":
        for name in ("E", "D", "M", "H", "C", "patch_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 1 <= self.e <= self.E:
            raise ValueError(f"cut layer e={self.e} must lie in [1, {self.E}]")
        if not 1 <= self.r < self.D:
            raise ValueError(f"LoRA rank r={self.r} must satisfy 1 <= r < D={self.D}")
        if self.D % self.H:
            raise ValueError(f"D={self.D} is not divisible by H={self.H}")
        if self.H != 1:
            raise ValueError("only single-head attention is supported (H=1)")
        if self.M > 0xFFFF:
            raise ValueError("M must fit in a u16 token index")
        if self.init_std <= 0 or self.ln_eps <= 0:
            raise ValueError("init_std and ln_eps must be positive")
        return self


class CompressionConfig(BaseModel):
    K: int = Field(6, description="Transmitted patch-token budget")
    q: int = Field(8, description="Quantization bit-width")
    pipeline: Pipeline = Field(Pipeline.TSFLORA, description="tsflora or split")
    raw_precision: Literal[32, 64] = Field(
        32, description="Float width of raw activations on the split pipeline"
    )

    class Config:
        extra = "forbid"

    @model_validator(mode="after")
    def check_bits(self) -> "CompressionConfig":
        if self.K < 1:
            raise ValueError(f"token budget K={self.K} must be >= 1")
        if self.q not in ALLOWED_BITS:
            raise ValueError(f"bit-width q={self.q} not in {ALLOWED_BITS}")
        return self


class TrainConfig(BaseModel):
    T: int = Field(20, description="Communication rounds")
    I: int = Field(2, description="Local steps per client")  # noqa: E741
    eta: float = Field(0.1, description="Learning rate for every adapter and the head")
    B: int = Field(16, description="Batch size")
    clients: int = Field(8, description="Client population V")
    clients_per_round: int = Field(4, description="Clients sampled each round")
    dirichlet_alpha: float = Field(0.5, description="Dirichlet concentration")
    iid: bool = Field(False, description="Uniform split instead of Dirichlet")
    client_budgets: Optional[List[int]] = Field(
        None, description="Per-client token budget K_n; defaults to compression.K"
    )
    compression: CompressionConfig = Field(default_factory=CompressionConfig)
    seed: int = Field(0, description="Copied from the top-level seed")

    class Config:
        extra = "forbid"

    @model_validator(mode="after")
    def check_counts(self) -> "TrainConfig":
        for name in ("T", "I", "B", "clients", "clients_per_round"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.clients_per_round > self.clients:
            raise ValueError("clients_per_round cannot exceed clients")
        if self.dirichlet_alpha <= 0:
            raise ValueError("dirichlet_alpha must be positive")
        if self.client_budgets is not None and len(self.client_budgets) != self.clients:
            raise ValueError("client_budgets needs one entry per client")
        return self


class DataSettings(BaseModel):
    n_train: int = Field(512, description="Synthetic training samples")
    n_test: int = Field(256, description="Synthetic test samples")
    noise: float = Field(0.5, description="Per-entry Gaussian noise std")
    token_spread: float = Field(0.5, description="Std of per-token prototype offsets")
    train_path: Optional[str] = Field(None, description="CSV training set")
    test_path: Optional[str] = Field(None, description="CSV test set")

    class Config:
        extra = "forbid"


class NetworkSettings(BaseModel):
    """Constants of the latency and memory estimates"""

    bandwidth_mbps: float = Field(10.0, description="Shared up/down link rate")
    device_flops_per_s: float = Field(1e9, description="Full-device compute rate")
    server_flops_per_s: float = Field(1e11, description="Server compute rate")
    flop_factor: float = Field(
        6.0, description="Flops per (token, dim, rank, block) unit, fwd + bwd"
    )
    device_memory_bytes: Optional[float] = Field(
        None, description="Reference device memory; null disables the memory filter"
    )

    class Config:
        extra = "forbid"


class SearchSettings(BaseModel):
    e_candidates: Optional[List[int]] = Field(None, description="Default: 1..E")
    k_min: int = Field(1)
    k_max: Optional[int] = Field(None, description="Default: M")
    q_set: List[int] = Field(default_factory=lambda: list(ALLOWED_BITS))
    c_max_bits: Optional[float] = Field(None, description="Null means unbounded")
    omega_bytes: Optional[float] = Field(None, description="Null means unbounded")

    class Config:
        extra = "forbid"


class BoundSettings(BaseModel):
    """Constants of the convergence residual that cannot be measured from runs"""

    sigma2: Union[float, List[float]] = Field(1.0, description="Per-client variance")
    gamma: float = Field(1.0)
    kappa: float = Field(1.0, description="Young-inequality parameter")
    S: float = Field(1.0, description="Smoothness")
    epsilon2: float = Field(1.0, description="Heterogeneity bound")
    Psi: Optional[float] = Field(None, description="Null: measure from activations")
    Lambda: Optional[float] = Field(None, description="Null: measure from activations")
    participation: Optional[List[float]] = Field(None, description="Default: all 1")
    weights: Optional[List[float]] = Field(None, description="Default: uniform")

    class Config:
        extra = "forbid"


class OutputSettings(BaseModel):
    dir: str = Field("workspace/runs", description="Relative to the working directory")
    log_level: str = Field("INFO")

    class Config:
        extra = "forbid"


_SECTIONS = {
    "model": ModelConfig,
    "compression": CompressionConfig,
    "train": TrainConfig,
    "data": DataSettings,
    "network": NetworkSettings,
    "search": SearchSettings,
    "bounds": BoundSettings,
    "output": OutputSettings,
}


def _config_error(section: str, exc: ValidationError) -> ConfigError:
    err = exc.errors()[0]
    loc = ".".join(str(part) for part in err.get("loc", ()))
    key = f"{section}.{loc}" if loc else section
    if err.get("type") == "extra_forbidden":
        return ConfigError(f"unknown key: {key}", key=key)
    return ConfigError(f"invalid value for {key}: {err.get('msg')}", key=key)


def read_toml(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"missing file: {path}", key=str(path))
    try:
        with path.open("rb") as f:
            return tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"unparsable config {path}: {e}") from e


def parse_section(section: str, data: Dict[str, Any]) -> BaseModel:
    """Validate one TOML section, mapping pydantic failures to ConfigError."""
    model_cls = _SECTIONS[section]
    try:
        return model_cls(**data)
    except ValidationError as e:
        raise _config_error(section, e) from e


class RunConfig(BaseModel):
    """Everything one CLI invocation needs; all randomness flows from ``seed``."""

    seed: int = 0
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    data: DataSettings = Field(default_factory=DataSettings)
    network: NetworkSettings = Field(default_factory=NetworkSettings)
    search: SearchSettings = Field(default_factory=SearchSettings)
    bounds: BoundSettings = Field(default_factory=BoundSettings)
    output: OutputSettings = Field(default_factory=OutputSettings)

    @property
    def compression(self) -> CompressionConfig:
        return self.train.compression

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "RunConfig":
        raw = dict(raw)
        seed = raw.pop("seed", 0)
        if not isinstance(seed, int) or seed < 0:
            raise ConfigError("invalid value for seed: expected a non-negative int", "seed")

        sections: Dict[str, Any] = {}
        for name, value in raw.items():
            if name not in _SECTIONS:
                raise ConfigError(f"unknown key: {name}", key=name)
            if not isinstance(value, dict):
                raise ConfigError(f"invalid value for {name}: expected a table", key=name)

        compression = parse_section("compression", raw.get("compression", {}))
        train_raw = dict(raw.get("train", {}))
        for forbidden in ("compression", "seed"):
            if forbidden in train_raw:
                raise ConfigError(
                    f"unknown key: train.{forbidden}", key=f"train.{forbidden}"
                )
        sections["train"] = parse_section(
            "train", {**train_raw, "compression": compression, "seed": seed}
        )
        for name in ("model", "data", "network", "search", "bounds", "output"):
            sections[name] = parse_section(name, raw.get(name, {}))

        run = cls(seed=seed, **sections)
        run._check_cross_fields()
        return run

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "RunConfig":
        return cls.from_dict(read_toml(path))

    def _check_cross_fields(self) -> None:
        m = self.model.M
        if self.compression.K > m:
            raise ConfigError(
                f"invalid value for compression.K: {self.compression.K} > M={m}",
                key="compression.K",
            )
        for k in self.train.client_budgets or []:
            if not 1 <= k <= m:
                raise ConfigError(
                    f"invalid value for train.client_budgets: {k} outside [1, {m}]",
                    key="train.client_budgets",
                )
        for e in self.search.e_candidates or []:
            if not 1 <= e <= self.model.E:
                raise ConfigError(
                    f"invalid value for search.e_candidates: {e} outside [1, {self.model.E}]",
                    key="search.e_candidates",
                )
        for q in self.search.q_set:
            if q not in ALLOWED_BITS:
                raise ConfigError(
                    f"invalid value for search.q_set: {q} not in {ALLOWED_BITS}",
                    key="search.q_set",
                )


class Config:
    _instance = None
    _lock = threading.Lock()
    _initialized = False

    def __new__(cls):
        if cls._instance is None:
            with cls._lock:
                if cls._instance is None:
                    cls._instance = super().__new__(cls)
        return cls._instance

    def __init__(self):
        if not self._initialized:
            with self._lock:
                if not self._initialized:
                    self._config: Optional[RunConfig] = None
                    self._load_initial_config()
                    self._initialized = True

    @staticmethod
    def _get_config_path() -> Path:
        root = PROJECT_ROOT
        config_path = root / "config" / "config.toml"
        if config_path.exists():
            return config_path
        example_path = root / "config" / "config.example.toml"
        if example_path.exists():
            return example_path
        raise ConfigError(f"missing file: {config_path}", key=str(config_path))

    def _load_initial_config(self):
        self._config = RunConfig.from_file(self._get_config_path())

    @property
    def run(self) -> RunConfig:
        return self._config

    @property
    def model(self) -> ModelConfig:
        return self._config.model

    @property
    def train(self) -> TrainConfig:
        return self._config.train

    @property
    def network(self) -> NetworkSettings:
        return self._config.network

    @property
    def root_path(self) -> Path:
        """Get the root path of the application"""
        return PROJECT_ROOT
