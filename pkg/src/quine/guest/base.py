"""Request/response types shared by every Guest provider."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Mapping

from ..protocol import TOOL_SCHEMAS, Message, RawToolCall, Role

DEFAULT_MAX_OUTPUT_TOKENS = 4096


class GuestError(Exception):
    """The Guest could not produce a usable response."""


class ProviderExhausted(GuestError):
    pass


class DecodeError(GuestError):
    pass


@dataclass(frozen=True)
class Usage:
    input_tokens: int = 0
    output_tokens: int = 0


@dataclass(frozen=True)
class GuestRequest:
    messages: tuple[Message, ...]
    model_id: str = "mock"
    max_output_tokens: int = DEFAULT_MAX_OUTPUT_TOKENS
    tool_schemas: tuple[dict, ...] = TOOL_SCHEMAS
    # Host-side bookkeeping; never serialized to a remote provider.
    mission: str = ""
    generation: int = 0
    turn: int = 0

    def __post_init__(self):
        if not self.messages or self.messages[0].role is not Role.SYSTEM:
            raise ValueError("first message of a Guest request must be System")
        if sum(m.role is Role.SYSTEM for m in self.messages) != 1:
            raise ValueError("exactly one System message per request")
        if tuple(s["name"] for s in self.tool_schemas) != ("sh", "fork", "exec", "exit"):
            raise ValueError("tool_schemas must declare exactly sh, fork, exec, exit")

    def to_dict(self) -> dict:
        return {
            "model": self.model_id,
            "max_output_tokens": self.max_output_tokens,
            "generation": self.generation,
            "turn": self.turn,
            "messages": [m.to_dict() for m in self.messages],
        }


@dataclass(frozen=True)
class GuestResponse:
    assistant_text: str | None = None
    tool_calls: tuple[RawToolCall, ...] = ()
    usage: Usage | None = None

    def __post_init__(self):
        ids = [c.id for c in self.tool_calls]
        if len(ids) != len(set(ids)):
            raise ValueError("tool call ids must be unique within a response")

    def to_message(self) -> Message:
        return Message(Role.ASSISTANT, self.assistant_text or "", tool_calls=self.tool_calls)


@dataclass(frozen=True)
class ProviderConfig:
    kind: str = "mock"
    mock_script: str | None = None
    mock_log: str | None = None
    api_base: str | None = None
    api_key: str | None = None
    model: str = "mock"
    max_output_tokens: int = DEFAULT_MAX_OUTPUT_TOKENS
    retries: int = 3
    backoff_s: float = 0.5
    timeout_s: float = 120.0
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_env(cls, env: Mapping[str, str] | None = None, kind: str | None = None) -> "ProviderConfig":
        env = os.environ if env is None else env
        kind = kind or env.get("QUINE_PROVIDER") or "mock"
        if kind not in ("mock", "http"):
            raise ValueError(f"unknown provider {kind!r} (expected mock or http)")
        return cls(
            kind=kind,
            mock_script=env.get("QUINE_MOCK_SCRIPT"),
            mock_log=env.get("QUINE_MOCK_LOG"),
            api_base=env.get("QUINE_API_BASE"),
            api_key=env.get("QUINE_API_KEY"),
            model=env.get("QUINE_MODEL") or ("mock" if kind == "mock" else ""),
        )


def make_provider(config: ProviderConfig):
    if config.kind == "mock":
        from .mock import MockProvider

        return MockProvider.from_config(config)
    if config.kind == "http":
        from .http import HttpProvider

        return HttpProvider(config)
    raise ValueError(f"unknown provider {config.kind!r}")


def complete(request: GuestRequest, provider) -> GuestResponse:
    """Ask the Guest for the next move.  Raises GuestError subclasses."""
    return provider.complete(request)
