"""Latency and device-memory estimates.

These are analytic estimates, not measurements:

* memory through cut ``e`` = device parameters (embedder, blocks ``1..e`` and
  their adapters, f64) + ``2 * B * (M+1) * D * e * 8`` bytes of activations
  (forward outputs plus the copies cached for backward);
* time = device compute + server compute + uplink + downlink, where compute
  is ``flop_factor * B * tokens * D * r * blocks * steps`` over the
  respective rate and links move ``bytes * 8 / (bandwidth_mbps * 1e6)``.
"""

import math
from typing import Dict, Iterable, List, Optional

from pydantic import BaseModel, Field

from app.config import ModelConfig, NetworkSettings
from app.exceptions import CostModelError
from app.schema import DeviceProfile


F64_BYTES = 8

# compute / memory shares of the reference device, repeating every ten ids
DEVICE_TIERS = (
    (3, DeviceProfile(compute_fraction=0.05, memory_fraction=0.08)),
    (7, DeviceProfile(compute_fraction=0.10, memory_fraction=0.10)),
    (10, DeviceProfile(compute_fraction=0.15, memory_fraction=0.12)),
)


def device_profile(client_id: int) -> DeviceProfile:
    slot = client_id % 10
    return next(profile for bound, profile in DEVICE_TIERS if slot < bound)


class MemoryModel(BaseModel):
    model: ModelConfig
    B: int = Field(..., ge=0)

    def param_count(self, e: int) -> int:
        cfg = self.model
        d = cfg.D
        embedder = cfg.patch_dim * d + (cfg.M + 1) * d + d
        block = 4 * d * d + 8 * d * d + 4 * d
        adapter = 2 * d * cfg.r
        return embedder + e * (block + adapter)

    def activation_bytes(self, e: int) -> int:
        cfg = self.model
        return 2 * self.B * (cfg.M + 1) * cfg.D * e * F64_BYTES

    def peak_bytes(self, e: int) -> int:
        if not 1 <= e <= self.model.E:
            raise CostModelError(f"cut layer e={e} outside [1, {self.model.E}]")
        return self.param_count(e) * F64_BYTES + self.activation_bytes(e)


def feasible_cuts(
    memory_model: MemoryModel, omega: Optional[float], candidates: Optional[Iterable[int]] = None
) -> List[int]:
    """Cut layers whose peak device memory fits ``omega`` bytes; ``None`` means unbounded."""
    cuts = list(candidates) if candidates is not None else list(range(1, memory_model.model.E + 1))
    if omega is None or math.isinf(omega):
        return sorted(cuts)
    if omega <= 0:
        raise CostModelError(f"memory budget must be positive, got {omega}")
    return sorted(e for e in cuts if memory_model.peak_bytes(e) <= omega)


class Workload(BaseModel):
    """What one client does in a round, for the latency model."""

    B: int
    M: int
    K: int
    D: int
    r: int
    E: int
    e: int
    steps: int = 1
    uplink_bytes: int = 0
    downlink_bytes: int = 0
    server_tokens: Optional[int] = Field(None, description="Default: K + 2")


def time_breakdown(
    workload: Workload, network: NetworkSettings, profile: DeviceProfile
) -> Dict[str, float]:
    for name in ("bandwidth_mbps", "device_flops_per_s", "server_flops_per_s"):
        if getattr(network, name) <= 0:
            raise CostModelError(f"{name} must be positive, got {getattr(network, name)}")
    w = workload
    tokens = w.server_tokens if w.server_tokens is not None else w.K + 2
    device_flops = network.flop_factor * w.B * (w.M + 1) * w.D * w.r * w.e * w.steps
    server_flops = network.flop_factor * w.B * tokens * w.D * w.r * (w.E - w.e) * w.steps
    link = network.bandwidth_mbps * 1e6
    return {
        "device_s": device_flops / (network.device_flops_per_s * profile.compute_fraction),
        "server_s": server_flops / network.server_flops_per_s,
        "uplink_s": w.uplink_bytes * 8 / link,
        "downlink_s": w.downlink_bytes * 8 / link,
    }


def execution_time(
    workload: Workload, network: NetworkSettings, profile: DeviceProfile
) -> float:
    parts = time_breakdown(workload, network, profile)
    return parts["device_s"] + parts["server_s"] + parts["uplink_s"] + parts["downlink_s"]
