from enum import Enum
from typing import List, Optional, Tuple

from pydantic import BaseModel, Field


ALLOWED_BITS: Tuple[int, ...] = (2, 4, 8, 16, 32)
METRICS_SCHEMA_VERSION = 1


class LoraSite(str, Enum):
    """Per-block projection that carries the LoRA pair"""

    QUERY = "query"
    KEY = "key"
    VALUE = "value"
    OUTPUT = "output"


LORA_SITE_CODES = {site: code for code, site in enumerate(LoraSite)}


class Pipeline(str, Enum):
    """How cut-layer activations travel from device to server"""

    TSFLORA = "tsflora"  # select + merge + q-bit quantize
    SPLIT = "split"  # raw activations, no token compression


class DeviceProfile(BaseModel):
    """Share of a reference device's compute and memory a client owns."""

    compute_fraction: float = Field(..., gt=0.0, le=1.0)
    memory_fraction: float = Field(..., gt=0.0, le=1.0)


class RoundMetrics(BaseModel):
    """One line of the metrics JSONL file"""

    schema_version: int = Field(default=METRICS_SCHEMA_VERSION)
    round: int
    train_loss: Optional[float] = Field(
        None, description="Mean cross-entropy over local steps; null when nobody trained"
    )
    test_accuracy: float
    uplink_bytes: int
    downlink_bytes: int
    activation_messages: int = 0
    gradient_messages: int = 0
    adapter_messages: int = 0
    participants: List[int] = Field(default_factory=list)
    simulated_time_s: float
    peak_device_memory_bytes: int
    server_checksums: List[Tuple[str, str]] = Field(
        default_factory=list,
        description="(start, end) digest of the server adapters per visited client",
    )
    excluded_clients: Optional[List[int]] = None

    def to_json_line(self) -> str:
        return self.model_dump_json() + "\n"
