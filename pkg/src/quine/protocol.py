"""Domain types of the POSIX mapping and context assembly.

Everything here is pure data: building a Guest request from OS state never
touches a file descriptor.  The four tool calls and their wire decoding
live here as well, since the Guest's raw response is decoded before the
tools module ever sees it.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence, Union

SYSTEM_TEMPLATE_VERSION = "quine-system/1"

WISDOM_PREFIX = "QUINE_WISDOM_"
GENERATION_VAR = "QUINE_GENERATION"

_WISDOM_KEY = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")

MAX_STATUS = 255
DEFAULT_SH_TIMEOUT = 120
DEFAULT_MAX_CHILDREN = 16

TOOL_NAMES = ("sh", "fork", "exec", "exit")


class Role(str, enum.Enum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"
    TOOL_RESULT = "tool"


class MaterialStatus(str, enum.Enum):
    AVAILABLE = "available"
    EXHAUSTED = "exhausted"
    ABSENT = "absent"


class StateTier(str, enum.Enum):
    """Lifetime scope of a piece of agent state."""

    EPHEMERAL = "ephemeral"  # process memory: gone on exec/exit
    SCOPED = "scoped"  # environment: survives fork (as a copy) and exec
    GLOBAL = "global"  # filesystem: survives termination

    @property
    def survives_exec(self) -> bool:
        return self is not StateTier.EPHEMERAL

    @property
    def survives_exit(self) -> bool:
        return self is StateTier.GLOBAL


class WisdomError(ValueError):
    pass


class MalformedToolArguments(ValueError):
    """A named tool was called with arguments that fail its schema."""


@dataclass(frozen=True)
class Mission:
    text: str

    def __post_init__(self):
        if not isinstance(self.text, str) or not self.text.strip():
            raise ValueError("mission must be non-empty")

    @classmethod
    def from_words(cls, words: Sequence[str]) -> "Mission":
        return cls(" ".join(words))

    def __str__(self) -> str:
        return self.text


@dataclass(frozen=True)
class RawToolCall:
    """A tool invocation as the Guest emitted it: arguments still undecoded."""

    id: str
    name: str
    arguments: str


@dataclass(frozen=True)
class Message:
    role: Role
    content: str
    tool_call_id: str | None = None
    tool_calls: tuple[RawToolCall, ...] = ()

    def __post_init__(self):
        if (self.role is Role.TOOL_RESULT) != (self.tool_call_id is not None):
            raise ValueError("tool_call_id is present iff role is ToolResult")
        if self.tool_calls and self.role is not Role.ASSISTANT:
            raise ValueError("only Assistant messages carry tool calls")

    def to_dict(self) -> dict:
        d: dict = {"role": self.role.value, "content": self.content}
        if self.tool_call_id is not None:
            d["tool_call_id"] = self.tool_call_id
        if self.tool_calls:
            d["tool_calls"] = [
                {"id": c.id, "name": c.name, "arguments": c.arguments}
                for c in self.tool_calls
            ]
        return d


def validate_wisdom_key(key: str) -> None:
    if not isinstance(key, str) or not _WISDOM_KEY.match(key):
        raise WisdomError(f"invalid wisdom key {key!r}: must match [A-Za-z_][A-Za-z0-9_]*")


def validate_wisdom_value(key: str, value: str) -> None:
    if not isinstance(value, str):
        raise WisdomError(f"wisdom value for {key!r} must be a string")
    if "\x00" in value:
        raise WisdomError(f"wisdom value for {key!r} contains a NUL byte")


@dataclass(frozen=True)
class WisdomMap:
    """Compact key/value state carried across exec in the environment."""

    entries: tuple[tuple[str, str], ...] = ()
    generation: int = 0

    def __post_init__(self):
        if self.generation < 0:
            raise WisdomError("generation must be non-negative")
        seen = set()
        for k, v in self.entries:
            validate_wisdom_key(k)
            validate_wisdom_value(k, v)
            if k in seen:
                raise WisdomError(f"duplicate wisdom key {k!r}")
            seen.add(k)

    @classmethod
    def of(cls, mapping: Mapping[str, str] | None = None, generation: int = 0) -> "WisdomMap":
        return cls(tuple((mapping or {}).items()), generation)

    def as_dict(self) -> dict[str, str]:
        return dict(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def renewed(self, entries: Mapping[str, str]) -> "WisdomMap":
        """The wisdom the next generation starts with."""
        return WisdomMap(tuple(entries.items()), self.generation + 1)

    def encode(self, env: Mapping[str, str]) -> dict[str, str]:
        """Return a copy of ``env`` carrying this wisdom.

        Existing wisdom variables are dropped first, so the encoded map is
        exactly this one.
        """
        out = {k: v for k, v in env.items() if not k.startswith(WISDOM_PREFIX)}
        out[GENERATION_VAR] = str(self.generation)
        for k, v in self.entries:
            out[WISDOM_PREFIX + k] = v
        return out

    @classmethod
    def decode(cls, env: Mapping[str, str]) -> "WisdomMap":
        raw_gen = env.get(GENERATION_VAR, "0") or "0"
        try:
            generation = int(raw_gen)
        except ValueError:
            raise WisdomError(f"{GENERATION_VAR}={raw_gen!r} is not an integer") from None
        entries = []
        for k, v in env.items():
            if k.startswith(WISDOM_PREFIX):
                key = k[len(WISDOM_PREFIX):]
                if _WISDOM_KEY.match(key):
                    entries.append((key, v))
        return cls(tuple(entries), generation)


# -- tool calls ---------------------------------------------------------------


@dataclass(frozen=True)
class ShCall:
    command: str
    timeout_s: int = DEFAULT_SH_TIMEOUT

    def __post_init__(self):
        if not self.command:
            raise ValueError("sh command must be non-empty")
        if self.timeout_s < 1:
            raise ValueError("timeout_s must be positive")


@dataclass(frozen=True)
class ChildSpec:
    mission: str
    material: str | None = None

    def __post_init__(self):
        if not self.mission.strip():
            raise ValueError("child mission must be non-empty")


@dataclass(frozen=True)
class ForkCall:
    children: tuple[ChildSpec, ...]
    wait: bool = True

    def __post_init__(self):
        if not self.children:
            raise ValueError("fork needs at least one child")


@dataclass(frozen=True)
class ExecCall:
    wisdom: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        for k, v in self.wisdom:
            validate_wisdom_key(k)
            validate_wisdom_value(k, v)

    @classmethod
    def of(cls, mapping: Mapping[str, str]) -> "ExecCall":
        return cls(tuple(mapping.items()))


@dataclass(frozen=True)
class ExitCall:
    status: int
    message: str | None = None

    def __post_init__(self):
        if not 0 <= self.status <= MAX_STATUS:
            raise ValueError(f"exit status {self.status} outside 0-255")


Action = Union[ShCall, ForkCall, ExecCall, ExitCall]


@dataclass(frozen=True)
class ToolCall:
    """One decoded tool call.  Exactly one of ``action``/``error`` is set."""

    id: str
    name: str
    action: Action | None = None
    error: MalformedToolArguments | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


# JSON schemas sent to the provider.  The validators below enforce the same
# contract by hand.
TOOL_SCHEMAS: tuple[dict, ...] = (
    {
        "name": "sh",
        "description": (
            "Run a POSIX shell command (sh -c). Returns the command's own stdout, "
            "stderr and exit status. Inside the command, fd 3 is your material "
            "(stdin), fd 4 is your deliverable (stdout), fd 5 is diagnostics (stderr)."
        ),
        "parameters": {
            "type": "object",
            "properties": {
                "command": {"type": "string", "minLength": 1},
                "timeout_s": {"type": "integer", "minimum": 1},
            },
            "required": ["command"],
            "additionalProperties": False,
        },
    },
    {
        "name": "fork",
        "description": (
            "Spawn child agents (this same program) each with its own mission (argv) "
            "and optional stdin text. With wait=true (default) block until all exit "
            "and return their stdout, stderr tail and exit status."
        ),
        "parameters": {
            "type": "object",
            "properties": {
                "children": {
                    "type": "array",
                    "minItems": 1,
                    "maxItems": DEFAULT_MAX_CHILDREN,
                    "items": {
                        "type": "object",
                        "properties": {
                            "argv": {"type": "string", "minLength": 1},
                            "stdin": {"type": "string"},
                        },
                        "required": ["argv"],
                        "additionalProperties": False,
                    },
                },
                "wait": {"type": "boolean"},
            },
            "required": ["children"],
            "additionalProperties": False,
        },
    },
    {
        "name": "exec",
        "description": (
            "Replace this process with a fresh instance: same pid, same mission, same "
            "stdin position. Conversation history is discarded; only the wisdom "
            "entries (saved as environment variables) carry over."
        ),
        "parameters": {
            "type": "object",
            "properties": {
                "wisdom": {"type": "object", "additionalProperties": {"type": "string"}},
            },
            "required": ["wisdom"],
            "additionalProperties": False,
        },
    },
    {
        "name": "exit",
        "description": "Terminate with a status code (0 = success). Optional message goes to stderr.",
        "parameters": {
            "type": "object",
            "properties": {
                "status": {"type": "integer", "minimum": 0, "maximum": MAX_STATUS},
                "message": {"type": "string"},
            },
            "required": ["status"],
            "additionalProperties": False,
        },
    },
)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _check_fields(args: dict, allowed: Iterable[str], required: Iterable[str]) -> None:
    extra = sorted(set(args) - set(allowed))
    if extra:
        raise MalformedToolArguments(f"unknown field(s): {', '.join(extra)}")
    missing = [r for r in required if r not in args]
    if missing:
        raise MalformedToolArguments(f"missing field(s): {', '.join(missing)}")


def _decode_sh(args: dict) -> ShCall:
    _check_fields(args, ("command", "timeout_s"), ("command",))
    command = args["command"]
    if not isinstance(command, str) or not command:
        raise MalformedToolArguments("command must be a non-empty string")
    timeout = args.get("timeout_s", DEFAULT_SH_TIMEOUT)
    if not _is_int(timeout) or timeout < 1:
        raise MalformedToolArguments("timeout_s must be an integer >= 1")
    return ShCall(command, timeout)


def _decode_fork(args: dict, max_children: int) -> ForkCall:
    _check_fields(args, ("children", "wait"), ("children",))
    children = args["children"]
    if not isinstance(children, list) or not children:
        raise MalformedToolArguments("children must be a non-empty array")
    if len(children) > max_children:
        raise MalformedToolArguments(f"at most {max_children} children per fork")
    specs = []
    for i, child in enumerate(children):
        if not isinstance(child, dict):
            raise MalformedToolArguments(f"children[{i}] must be an object")
        try:
            _check_fields(child, ("argv", "stdin"), ("argv",))
        except MalformedToolArguments as e:
            raise MalformedToolArguments(f"children[{i}]: {e}") from None
        argv = child["argv"]
        if not isinstance(argv, str) or not argv.strip():
            raise MalformedToolArguments(f"children[{i}].argv must be a non-empty string")
        stdin = child.get("stdin")
        if stdin is not None and not isinstance(stdin, str):
            raise MalformedToolArguments(f"children[{i}].stdin must be a string")
        specs.append(ChildSpec(argv, stdin))
    wait = args.get("wait", True)
    if not isinstance(wait, bool):
        raise MalformedToolArguments("wait must be a boolean")
    return ForkCall(tuple(specs), wait)


def _decode_exec(args: dict) -> ExecCall:
    _check_fields(args, ("wisdom",), ("wisdom",))
    wisdom = args["wisdom"]
    if not isinstance(wisdom, dict):
        raise MalformedToolArguments("wisdom must be an object of strings")
    for k, v in wisdom.items():
        if not isinstance(v, str):
            raise MalformedToolArguments(f"wisdom[{k!r}] must be a string")
    try:
        return ExecCall.of(wisdom)
    except WisdomError as e:
        raise MalformedToolArguments(str(e)) from None


def _decode_exit(args: dict) -> ExitCall:
    _check_fields(args, ("status", "message"), ("status",))
    status = args["status"]
    if not _is_int(status) or not 0 <= status <= MAX_STATUS:
        raise MalformedToolArguments(f"status must be an integer in 0-255, got {status!r}")
    message = args.get("message")
    if message is not None and not isinstance(message, str):
        raise MalformedToolArguments("message must be a string")
    return ExitCall(status, message)


def decode_tool_call(raw: RawToolCall, max_children: int = DEFAULT_MAX_CHILDREN) -> ToolCall:
    try:
        if raw.name not in TOOL_NAMES:
            raise MalformedToolArguments(
                f"unknown tool {raw.name!r}; available: {', '.join(TOOL_NAMES)}"
            )
        try:
            args = json.loads(raw.arguments) if raw.arguments.strip() else {}
        except json.JSONDecodeError as e:
            raise MalformedToolArguments(f"arguments are not valid JSON: {e}") from None
        if not isinstance(args, dict):
            raise MalformedToolArguments("arguments must be a JSON object")
        if raw.name == "sh":
            action: Action = _decode_sh(args)
        elif raw.name == "fork":
            action = _decode_fork(args, max_children)
        elif raw.name == "exec":
            action = _decode_exec(args)
        else:
            action = _decode_exit(args)
    except MalformedToolArguments as e:
        return ToolCall(raw.id, raw.name, error=e)
    return ToolCall(raw.id, raw.name, action=action)


def parse_guest_response(raw, max_children: int = DEFAULT_MAX_CHILDREN) -> list[ToolCall]:
    """Decode every tool call of a Guest response, in provider order.

    Rejected calls come back with ``error`` set instead of raising, so the
    host can report them to the Guest as tool results.
    """
    return [decode_tool_call(c, max_children) for c in raw.tool_calls]


# -- context assembly ---------------------------------------------------------

_SYSTEM_BODY = """\
You are an agent running as a POSIX process (template {version}).

MISSION (argv, immutable):
{mission}

You act only through four tools:
- sh(command, timeout_s?): run `sh -c command`. You get back the command's own stdout, stderr and exit status.
  Inside every command: fd 3 = your material (stdin), fd 4 = your deliverable (stdout), fd 5 = your diagnostics (stderr).
  Read input with e.g. `cat <&3`; emit results with e.g. `echo "result" >&4`. Only fd 4 reaches your consumer.
  Material is consumed as it is read; bytes read from fd 3 are never shown again.
- fork(children[{{argv, stdin?}}], wait?): spawn copies of yourself with sub-missions and optional stdin text.
- exec(wisdom{{key: value}}): restart with a clean context; same pid, mission and stdin position. Only wisdom survives.
- exit(status, message?): terminate. 0 means success; any other value means failure.
Nothing happens unless you call a tool. Finish by calling exit.

GENERATION: {generation}
"""


def render_system(mission: Mission, wisdom: WisdomMap) -> str:
    text = _SYSTEM_BODY.format(
        version=SYSTEM_TEMPLATE_VERSION, mission=mission.text, generation=wisdom.generation
    )
    if wisdom.generation > 0:
        lines = ["", "WISDOM (saved by your previous generation before exec):"]
        if wisdom.entries:
            lines += [f"{k} = {json.dumps(v, ensure_ascii=False)}" for k, v in wisdom.entries]
        else:
            lines.append("(none)")
        text += "\n".join(lines) + "\n"
    return text


_MATERIAL_NOTES = {
    MaterialStatus.AVAILABLE: "Material is attached on your stdin. It is NOT included here; read it from fd 3 inside sh.",
    MaterialStatus.EXHAUSTED: "Your stdin has reached end of file; all material has been consumed.",
    MaterialStatus.ABSENT: "No material is attached: stdin is empty.",
}


def render_user(material_status: MaterialStatus, advisory: str | None = None) -> str:
    text = (
        f"{_MATERIAL_NOTES[material_status]}\n"
        "Channels inside sh: fd 3 = material (stdin), fd 4 = deliverable (stdout), "
        "fd 5 = diagnostics (stderr).\n"
    )
    if advisory:
        text += f"\nNOTE: {advisory}\n"
    return text


def assemble_context(
    mission: Mission,
    wisdom: WisdomMap,
    history: Sequence[Message],
    material_status: MaterialStatus,
    advisory: str | None = None,
) -> list[Message]:
    """Build the message list for one Guest call: ``[System, User, *history]``."""
    system = Message(Role.SYSTEM, render_system(mission, wisdom))
    user = Message(Role.USER, render_user(material_status, advisory))
    return [system, user, *history]
