from app.model.checkpoint import load_checkpoint, save_checkpoint
from app.model.params import BlockParams, Embedder, LoraAdapter, SplitModel
from app.model.split import (
    DeviceForwardOutput,
    ServerForwardOutput,
    device_backward,
    device_forward,
    init_model,
    server_backward,
    server_forward,
    sgd_step,
)


__all__ = [
    "BlockParams",
    "Embedder",
    "LoraAdapter",
    "SplitModel",
    "DeviceForwardOutput",
    "ServerForwardOutput",
    "init_model",
    "device_forward",
    "server_forward",
    "server_backward",
    "device_backward",
    "sgd_step",
    "save_checkpoint",
    "load_checkpoint",
]
