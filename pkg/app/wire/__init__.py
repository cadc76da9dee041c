from app.wire.accounting import (
    activation_message_bytes,
    adapter_message_bytes,
    compression_ratio,
    gradient_message_bytes,
    metadata_bits,
    payload_bits,
    raw_message_bytes,
)
from app.wire.codec import (
    ActivationMeta,
    MessageMeta,
    decode_activations,
    decode_adapters,
    decode_gradient,
    decode_raw_activations,
    encode_activations,
    encode_adapters,
    encode_gradient,
    encode_raw_activations,
    inspect_message,
)


__all__ = [
    "ActivationMeta",
    "MessageMeta",
    "encode_activations",
    "decode_activations",
    "encode_gradient",
    "decode_gradient",
    "encode_raw_activations",
    "decode_raw_activations",
    "encode_adapters",
    "decode_adapters",
    "inspect_message",
    "payload_bits",
    "metadata_bits",
    "compression_ratio",
    "activation_message_bytes",
    "gradient_message_bytes",
    "raw_message_bytes",
    "adapter_message_bytes",
]
