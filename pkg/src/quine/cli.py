"""``quine [flags] <mission words...>``: the single-image entry point."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

from . import __version__
from .guest import ProviderConfig
from .host import (
    DEFAULT_CONTEXT_WINDOW,
    DEFAULT_MAX_TURNS,
    DEFAULT_PRESSURE,
    EXIT_PROVIDER,
    EXIT_USAGE,
    HostConfig,
    run,
)
from .protocol import Mission
from .trace import TRACE_DIR_VAR

ENV_HELP = """\
environment:
  QUINE_PROVIDER        mock | http (default mock); --provider wins
  QUINE_MOCK_SCRIPT     path to the mock script (JSON)
  QUINE_API_BASE        base URL of a chat-completions endpoint (http provider)
  QUINE_API_KEY         bearer token for the http provider
  QUINE_MODEL           model id for the http provider
  QUINE_MAX_TURNS       Guest calls per generation (default 32); --max-turns wins
  QUINE_TRACE_DIR       directory for session traces; --trace wins; inherited by children
  QUINE_GENERATION      exec generation counter (set by the runtime)
  QUINE_WISDOM_<key>    wisdom entries carried across exec (set by the runtime)
  QUINE_CONTEXT_WINDOW  context size in tokens used for the renewal advisory (default 200000)
  QUINE_CONTEXT_PRESSURE fraction of the window that triggers the advisory (default 0.8)

channels inside every sh call: fd 3 = stdin (material), fd 4 = stdout
(deliverable), fd 5 = stderr (diagnostics).

exit status: the Guest's chosen status, or 64 usage error, 70 turn budget
exhausted / internal error, 75 Guest provider unavailable, 127 (per child)
fork spawn failure.
"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(
        prog="quine",
        description="Run an LLM agent as a POSIX process: mission in argv, material on stdin, "
                    "deliverable on stdout, diagnostics on stderr, outcome in the exit status.",
        epilog=ENV_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--max-turns", type=int, metavar="N", help="Guest calls allowed per generation")
    p.add_argument("--trace", metavar="PATH", help="directory for session trace files")
    p.add_argument("--provider", choices=("mock", "http"), help="Guest provider")
    p.add_argument("--version", action="version", version=f"quine {__version__}")
    p.add_argument("mission", nargs=argparse.REMAINDER, help="mission words (joined with spaces)")
    return p


@dataclass(frozen=True)
class LaunchSpec:
    mission_words: tuple[str, ...]
    flags: dict = field(default_factory=dict)
    env_snapshot: dict = field(default_factory=dict)
    config: HostConfig = field(default_factory=HostConfig)

    @property
    def mission(self) -> Mission:
        return Mission.from_words(self.mission_words)


def _env_int(env: Mapping[str, str], name: str, default: int) -> int:
    raw = env.get(name)
    if raw in (None, ""):
        return default
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{name}={raw!r} is not an integer") from None


def _env_float(env: Mapping[str, str], name: str, default: float) -> float:
    raw = env.get(name)
    if raw in (None, ""):
        return default
    try:
        return float(raw)
    except ValueError:
        raise UsageError(f"{name}={raw!r} is not a number") from None


def parse_launch(argv: Sequence[str], env: Mapping[str, str]) -> LaunchSpec:
    """Split flags from mission words and resolve configuration.

    Raises UsageError for an empty mission, unknown flags or bad values.
    """
    ns = build_parser().parse_args(list(argv))
    words = list(ns.mission)
    if words and words[0] == "--":
        words = words[1:]
    if not " ".join(words).strip():
        raise UsageError("a non-empty mission is required")

    max_turns = ns.max_turns if ns.max_turns is not None else _env_int(env, "QUINE_MAX_TURNS", DEFAULT_MAX_TURNS)
    if max_turns < 1:
        raise UsageError("max turns must be >= 1")
    trace_dir = ns.trace or env.get(TRACE_DIR_VAR) or None
    try:
        provider = ProviderConfig.from_env(env, ns.provider)
    except ValueError as e:
        raise UsageError(str(e)) from None
    try:
        config = HostConfig(
            max_turns=max_turns,
            provider=provider,
            trace_dir=os.path.abspath(trace_dir) if trace_dir else None,
            context_window=_env_int(env, "QUINE_CONTEXT_WINDOW", DEFAULT_CONTEXT_WINDOW),
            context_pressure_threshold=_env_float(env, "QUINE_CONTEXT_PRESSURE", DEFAULT_PRESSURE),
        )
    except ValueError as e:
        raise UsageError(str(e)) from None
    flags = {k: v for k, v in vars(ns).items() if k != "mission" and v is not None}
    return LaunchSpec(tuple(words), flags, dict(env), config)


def setup_logging() -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("quine[%(process)d]: %(message)s"))
    root = logging.getLogger("quine")
    root.handlers[:] = [handler]
    root.setLevel(logging.WARNING)
    root.propagate = False


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    setup_logging()
    try:
        spec = parse_launch(argv, os.environ)
    except UsageError as e:
        build_parser().print_usage(sys.stderr)
        print(f"quine: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    env = dict(os.environ)
    config = spec.config
    if config.trace_dir:
        # children find the trace directory through the environment
        env["QUINE_TRACE_DIR"] = config.trace_dir
    try:
        run(config, argv, spec.mission, env)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 1
    return EXIT_PROVIDER  # pragma: no cover - run() always exits


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
