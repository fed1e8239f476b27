from .base import (
    DecodeError,
    GuestError,
    GuestRequest,
    GuestResponse,
    ProviderConfig,
    ProviderExhausted,
    Usage,
    complete,
    make_provider,
)

__all__ = [
    "DecodeError",
    "GuestError",
    "GuestRequest",
    "GuestResponse",
    "ProviderConfig",
    "ProviderExhausted",
    "Usage",
    "complete",
    "make_provider",
]
