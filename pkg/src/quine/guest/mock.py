"""Deterministic scripted Guest.

A mock script is one JSON document::

    {
      "rules": [
        {
          "match": "^count",                  # re.search against the mission
          "responses": [RESPONSE, ...],       # same list for every generation
          "tokens_per_message": 100           # optional, synthetic usage
        },
        {
          "match": "renew",
          "generations": [[RESPONSE, ...],    # generation 0
                          [RESPONSE, ...]]    # generation 1, ...
        }
      ]
    }

A RESPONSE is ``{"text": "...", "tool_calls": [{"name": "sh",
"arguments": {"command": "ls"}}]}``.  ``arguments`` may also be a raw string,
which is passed through undecoded (handy for testing malformed calls).
The bare list form ``[rule, ...]`` is accepted too.

Turn ``t`` of generation ``g`` gets ``responses[t]`` (or
``generations[g][t]``).  The first matching rule wins.  Running off the end
of a list, or matching no rule, yields a synthetic ``exit(1)``.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass
from typing import Any, Sequence

from ..protocol import RawToolCall
from .base import GuestRequest, GuestResponse, ProviderConfig, Usage

DEFAULT_TOKENS_PER_MESSAGE = 100

EXHAUSTED_STATUS = 1


class MockScriptError(ValueError):
    pass


@dataclass(frozen=True)
class MockRule:
    match: re.Pattern
    generations: tuple[tuple[dict, ...], ...] | None = None
    responses: tuple[dict, ...] | None = None
    tokens_per_message: int = DEFAULT_TOKENS_PER_MESSAGE

    def scripted(self, generation: int) -> Sequence[dict] | None:
        if self.responses is not None:
            return self.responses
        if generation < len(self.generations):
            return self.generations[generation]
        return None


@dataclass(frozen=True)
class MockScript:
    rules: tuple[MockRule, ...]

    @classmethod
    def from_obj(cls, obj: Any) -> "MockScript":
        raw_rules = obj.get("rules") if isinstance(obj, dict) else obj
        if not isinstance(raw_rules, list):
            raise MockScriptError("mock script must be {'rules': [...]} or a list of rules")
        rules = []
        for i, r in enumerate(raw_rules):
            if not isinstance(r, dict) or "match" not in r:
                raise MockScriptError(f"rule {i}: needs a 'match' pattern")
            if ("responses" in r) == ("generations" in r):
                raise MockScriptError(f"rule {i}: give exactly one of 'responses' or 'generations'")
            try:
                pattern = re.compile(r["match"])
            except re.error as e:
                raise MockScriptError(f"rule {i}: bad pattern: {e}") from None
            responses = generations = None
            if "responses" in r:
                responses = tuple(_check_response(x, i) for x in r["responses"])
            else:
                generations = tuple(
                    tuple(_check_response(x, i) for x in gen) for gen in r["generations"]
                )
            rules.append(MockRule(pattern, generations, responses,
                                  int(r.get("tokens_per_message", DEFAULT_TOKENS_PER_MESSAGE))))
        return cls(tuple(rules))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "MockScript":
        with open(path, encoding="utf-8") as fh:
            try:
                return cls.from_obj(json.load(fh))
            except json.JSONDecodeError as e:
                raise MockScriptError(f"{path}: {e}") from None

    def rule_for(self, mission: str) -> MockRule | None:
        for rule in self.rules:
            if rule.match.search(mission):
                return rule
        return None


def _check_response(obj: Any, rule_index: int) -> dict:
    if not isinstance(obj, dict):
        raise MockScriptError(f"rule {rule_index}: each response must be an object")
    unknown = set(obj) - {"text", "tool_calls"}
    if unknown:
        raise MockScriptError(f"rule {rule_index}: unknown response field(s) {sorted(unknown)}")
    for c in obj.get("tool_calls", []):
        if not isinstance(c, dict) or "name" not in c:
            raise MockScriptError(f"rule {rule_index}: tool call needs a 'name'")
    return obj


def _synthetic_exit(reason: str) -> GuestResponse:
    args = json.dumps({"status": EXHAUSTED_STATUS, "message": f"mock guest: {reason}"})
    return GuestResponse(
        assistant_text=f"mock guest: {reason}",
        tool_calls=(RawToolCall("mock-exit", "exit", args),),
    )


class MockProvider:
    """Replays a MockScript.  Holds no per-call state."""

    def __init__(self, script: MockScript | None, log_path: str | None = None):
        self.script = script
        self.log_path = log_path

    @classmethod
    def from_config(cls, config: ProviderConfig) -> "MockProvider":
        script = MockScript.load(config.mock_script) if config.mock_script else None
        return cls(script, config.mock_log)

    def complete(self, request: GuestRequest) -> GuestResponse:
        if self.log_path:
            self._log(request)
        rule = self.script.rule_for(request.mission) if self.script else None
        if rule is None:
            return _synthetic_exit(f"no rule matches mission {request.mission!r}")
        scripted = rule.scripted(request.generation)
        if scripted is None or request.turn >= len(scripted):
            return _synthetic_exit(
                f"script exhausted at generation {request.generation}, turn {request.turn}"
            )
        spec = scripted[request.turn]
        calls = []
        for i, c in enumerate(spec.get("tool_calls", [])):
            args = c.get("arguments", {})
            raw = args if isinstance(args, str) else json.dumps(args, ensure_ascii=False)
            calls.append(RawToolCall(f"g{request.generation}t{request.turn}c{i}", c["name"], raw))
        n = len(request.messages)
        usage = Usage(input_tokens=n * rule.tokens_per_message, output_tokens=max(1, len(calls)) * 10)
        return GuestResponse(spec.get("text"), tuple(calls), usage)

    def _log(self, request: GuestRequest) -> None:
        rec = {"pid": os.getpid(), "mission": request.mission, **request.to_dict()}
        line = json.dumps(rec, ensure_ascii=False) + "\n"
        fd = os.open(self.log_path, os.O_WRONLY | os.O_CREAT | os.O_APPEND | os.O_CLOEXEC, 0o644)
        try:
            os.write(fd, line.encode())
        finally:
            os.close(fd)


# Builders used by tests and the harness to write scripts.


def sh(command: str, **extra) -> dict:
    return {"tool_calls": [{"name": "sh", "arguments": {"command": command, **extra}}]}


def fork(*children, wait: bool = True) -> dict:
    kids = []
    for c in children:
        if isinstance(c, str):
            kids.append({"argv": c})
        else:
            mission, stdin = c
            kids.append({"argv": mission, "stdin": stdin})
    return {"tool_calls": [{"name": "fork", "arguments": {"children": kids, "wait": wait}}]}


def exec_(wisdom: dict | None = None) -> dict:
    return {"tool_calls": [{"name": "exec", "arguments": {"wisdom": dict(wisdom or {})}}]}


def exit_(status: int = 0, message: str | None = None) -> dict:
    args: dict = {"status": status}
    if message is not None:
        args["message"] = message
    return {"tool_calls": [{"name": "exit", "arguments": args}]}


def rule(match: str, responses=None, *, generations=None, **extra) -> dict:
    r: dict = {"match": match, **extra}
    if generations is not None:
        r["generations"] = [list(g) for g in generations]
    else:
        r["responses"] = list(responses or [])
    return r


def write_script(path: str | os.PathLike, rules: Sequence[dict]) -> str:
    MockScript.from_obj({"rules": list(rules)})  # validate before writing
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"rules": list(rules)}, fh, indent=1, ensure_ascii=False)
    return os.fspath(path)
