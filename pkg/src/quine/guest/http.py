"""Generic chat-completions-with-tools HTTP provider (OpenAI-compatible wire)."""

from __future__ import annotations

import json
import logging
import socket
import time
import urllib.error
import urllib.request

from ..protocol import Message, RawToolCall, Role
from .base import DecodeError, GuestRequest, GuestResponse, ProviderConfig, ProviderExhausted, Usage

log = logging.getLogger("quine")

_TRANSIENT_HTTP = {408, 409, 425, 429, 500, 502, 503, 504}


def encode_message(m: Message) -> dict:
    if m.role is Role.TOOL_RESULT:
        return {"role": "tool", "tool_call_id": m.tool_call_id, "content": m.content}
    if m.role is Role.ASSISTANT and m.tool_calls:
        return {
            "role": "assistant",
            "content": m.content or None,
            "tool_calls": [
                {"id": c.id, "type": "function", "function": {"name": c.name, "arguments": c.arguments}}
                for c in m.tool_calls
            ],
        }
    return {"role": m.role.value, "content": m.content}


def encode_request(request: GuestRequest) -> dict:
    return {
        "model": request.model_id,
        "max_tokens": request.max_output_tokens,
        "messages": [encode_message(m) for m in request.messages],
        "tools": [
            {"type": "function", "function": {
                "name": s["name"], "description": s["description"], "parameters": s["parameters"]}}
            for s in request.tool_schemas
        ],
        "tool_choice": "auto",
    }


def decode_response(body: dict) -> GuestResponse:
    try:
        msg = body["choices"][0]["message"]
        calls = []
        for c in msg.get("tool_calls") or []:
            fn = c["function"]
            args = fn.get("arguments", "")
            if not isinstance(args, str):
                args = json.dumps(args)
            calls.append(RawToolCall(str(c["id"]), str(fn["name"]), args))
        usage = None
        if isinstance(body.get("usage"), dict):
            u = body["usage"]
            usage = Usage(int(u.get("prompt_tokens", 0)), int(u.get("completion_tokens", 0)))
        return GuestResponse(msg.get("content") or None, tuple(calls), usage)
    except (KeyError, IndexError, TypeError, ValueError) as e:
        raise DecodeError(f"unexpected provider response shape: {e!r}") from None


class HttpProvider:
    def __init__(self, config: ProviderConfig, sleep=time.sleep):
        if not config.api_base:
            raise ValueError("QUINE_API_BASE is required for the http provider")
        self.config = config
        self.url = config.api_base.rstrip("/") + "/chat/completions"
        self._sleep = sleep

    def _post(self, payload: bytes) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.config.api_key:
            headers["Authorization"] = f"Bearer {self.config.api_key}"
        req = urllib.request.Request(self.url, data=payload, headers=headers, method="POST")
        with urllib.request.urlopen(req, timeout=self.config.timeout_s) as resp:
            raw = resp.read()
        try:
            return json.loads(raw)
        except ValueError as e:
            raise DecodeError(f"provider returned non-JSON body: {e}") from None

    def complete(self, request: GuestRequest) -> GuestResponse:
        if self.config.model:
            request = GuestRequest(
                request.messages, self.config.model, request.max_output_tokens,
                request.tool_schemas, request.mission, request.generation, request.turn,
            )
        payload = json.dumps(encode_request(request)).encode()
        attempts = max(1, self.config.retries)
        last: Exception | None = None
        for attempt in range(attempts):
            if attempt:
                delay = self.config.backoff_s * (2 ** (attempt - 1))
                log.warning("guest: retrying in %.2fs after %s", delay, last)
                self._sleep(delay)
            try:
                return decode_response(self._post(payload))
            except urllib.error.HTTPError as e:
                if e.code not in _TRANSIENT_HTTP:
                    raise ProviderExhausted(f"HTTP {e.code} from {self.url}: {e.reason}") from None
                last = e
            except (urllib.error.URLError, socket.timeout, ConnectionError) as e:
                last = e
        raise ProviderExhausted(f"{attempts} attempt(s) failed; last error: {last}")
