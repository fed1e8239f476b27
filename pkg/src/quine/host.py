"""The cognitive loop.

The host owns all authoritative state (history, lifecycle, descriptors) and
contains no task logic: it assembles context, asks the Guest, executes the
returned tool calls and repeats until an exit.
"""

from __future__ import annotations

import fcntl
import logging
import os
import select
import stat
import struct
import sys
import termios
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from . import tools
from .guest import GuestError, GuestRequest, GuestResponse, ProviderConfig, make_provider
from .process import SpawnFailure
from .protocol import (
    GENERATION_VAR,
    ExecCall,
    ExitCall,
    ForkCall,
    MaterialStatus,
    Message,
    Mission,
    Role,
    ShCall,
    ToolCall,
    WisdomMap,
    assemble_context,
    parse_guest_response,
)
from .tools import PARENT_SESSION_VAR, SESSION_VAR, Caps, ChannelSet, JobTable, ToolError
from .trace import EventKind, SessionTrace, new_session_id

log = logging.getLogger("quine")

EXIT_TURN_BUDGET = 70
EXIT_PROVIDER = 75
EXIT_USAGE = 64

DEFAULT_MAX_TURNS = 32
DEFAULT_CONTEXT_WINDOW = 200_000
DEFAULT_PRESSURE = 0.8
BYTES_PER_TOKEN = 4


def default_self_image() -> list[str]:
    return [sys.executable, "-m", "quine"]


@dataclass(frozen=True)
class HostConfig:
    max_turns: int = DEFAULT_MAX_TURNS
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    caps: Caps = field(default_factory=Caps)
    trace_dir: str | None = None
    context_pressure_threshold: float = DEFAULT_PRESSURE
    context_window: int = DEFAULT_CONTEXT_WINDOW
    max_children: int = 16
    self_image: tuple[str, ...] = field(default_factory=lambda: tuple(default_self_image()))

    def __post_init__(self):
        if self.max_turns < 1:
            raise ValueError("max_turns must be >= 1")
        if not 0 < self.context_pressure_threshold <= 1:
            raise ValueError("context_pressure_threshold must be in (0, 1]")


@dataclass
class LoopState:
    mission: Mission
    wisdom: WisdomMap
    history: list[Message] = field(default_factory=list)
    turn: int = 0
    material_status: MaterialStatus = MaterialStatus.AVAILABLE


def probe_material(fd: int) -> MaterialStatus:
    """Classify the material stream without consuming a byte of it."""
    try:
        st = os.fstat(fd)
    except OSError:
        return MaterialStatus.ABSENT
    mode = st.st_mode
    if stat.S_ISCHR(mode):
        # terminal or /dev/null: nothing was piped in
        return MaterialStatus.ABSENT
    if stat.S_ISREG(mode):
        try:
            pos = os.lseek(fd, 0, os.SEEK_CUR)
        except OSError:
            return MaterialStatus.AVAILABLE
        return MaterialStatus.EXHAUSTED if pos >= st.st_size else MaterialStatus.AVAILABLE
    if stat.S_ISFIFO(mode) or stat.S_ISSOCK(mode):
        poller = select.poll()
        poller.register(fd, select.POLLIN)
        ready = poller.poll(0)
        if not ready:
            return MaterialStatus.AVAILABLE
        try:
            buf = fcntl.ioctl(fd, termios.FIONREAD, b"\0\0\0\0")
            pending = struct.unpack("i", buf)[0]
        except OSError:
            return MaterialStatus.AVAILABLE
        return MaterialStatus.AVAILABLE if pending > 0 else MaterialStatus.EXHAUSTED
    return MaterialStatus.AVAILABLE


def estimate_tokens(messages: Sequence[Message]) -> int:
    return sum(len(m.content.encode()) + sum(len(c.arguments) for c in m.tool_calls)
               for m in messages) // BYTES_PER_TOKEN


class Host:
    def __init__(
        self,
        config: HostConfig,
        argv: Sequence[str],
        mission: Mission,
        env: Mapping[str, str],
        channels: ChannelSet = ChannelSet(),
        provider=None,
    ):
        self.config = config
        self.argv = list(argv)
        self.channels = channels
        self.env = dict(env)
        session = self.env.get(SESSION_VAR)
        if session:
            wisdom = WisdomMap.decode(self.env)
            parent_session = None
        else:
            # A fresh session always starts at generation 0, whatever it inherited.
            session = new_session_id()
            inherited = WisdomMap.decode({k: v for k, v in self.env.items() if k != GENERATION_VAR})
            wisdom = WisdomMap(inherited.entries, 0)
            parent_session = self.env.get(PARENT_SESSION_VAR)
            self.env[GENERATION_VAR] = "0"
        self.env[SESSION_VAR] = session
        self.session_id = session
        self.state = LoopState(mission, wisdom)
        self.jobs = JobTable()
        self.trace = SessionTrace.open(
            config.trace_dir,
            session_id=session,
            generation=wisdom.generation,
            mission=mission.text,
            argv=self.argv,
            parent_session=parent_session,
        )
        self._provider = provider
        self._last_usage: int | None = None
        self.bg_reports: list[str] = []

    # -- plumbing ---------------------------------------------------------

    @property
    def provider(self):
        if self._provider is None:
            self._provider = make_provider(self.config.provider)
        return self._provider

    def diag(self, msg: str) -> None:
        log.warning("%s", msg)

    def child_env(self) -> dict[str, str]:
        return tools.child_environment(self.env, self.session_id)

    def shell_env(self) -> dict[str, str]:
        env = dict(self.env)
        env.pop(SESSION_VAR, None)
        env[PARENT_SESSION_VAR] = self.session_id
        return env

    def _exit(self, status: int, message: str | None = None, reason: str = "guest"):
        def finalize(code: int, killed: list[int]) -> None:
            self.trace.emit(EventKind.EXIT, self.state.turn, status=code, reason=reason,
                            killed_children=killed)
            self.trace.close()

        tools.do_exit(ExitCall(status, message), jobs=self.jobs, finalize=finalize)

    def fail(self, status: int, message: str, reason: str):
        self._exit(status, f"quine[{os.getpid()}]: {message}", reason)

    # -- loop -------------------------------------------------------------

    def advisory(self, messages: Sequence[Message]) -> str | None:
        used = self._last_usage if self._last_usage is not None else estimate_tokens(messages)
        limit = self.config.context_pressure_threshold * self.config.context_window
        if used >= limit:
            pct = 100 * used / self.config.context_window
            return (f"context usage is about {pct:.0f}% of the window. Consider saving progress "
                    "as wisdom and calling exec to continue with a fresh context.")
        return None

    def _background_note(self) -> str | None:
        self.jobs.pump()
        for hid in list(self.jobs.jobs):
            res = tools.poll_job(hid, self.jobs)
            if isinstance(res, tools.Done):
                self.bg_reports.append(f"background job {hid} finished:\n{res.outcome.render()}")
        running = [f"job {h.id} (pid {h.pid})" for h in self.jobs.jobs.values()]
        parts = list(self.bg_reports)
        if running:
            parts.append("still running: " + ", ".join(running))
        return "\n".join(parts) if parts else None

    def build_request(self) -> GuestRequest:
        st = self.state
        st.material_status = probe_material(self.channels.material)
        notes = [n for n in (self._background_note(),) if n]
        base = assemble_context(st.mission, st.wisdom, st.history, st.material_status)
        adv = self.advisory(base)
        if adv:
            notes.append(adv)
        msgs = assemble_context(st.mission, st.wisdom, st.history, st.material_status,
                                "\n".join(notes) if notes else None)
        return GuestRequest(
            tuple(msgs),
            model_id=self.config.provider.model or "mock",
            max_output_tokens=self.config.provider.max_output_tokens,
            mission=st.mission.text,
            generation=st.wisdom.generation,
            turn=st.turn,
        )

    def run(self):
        """Drive the session until an exit.  Never returns normally."""
        st = self.state
        self.trace.emit(
            EventKind.START, 0,
            mission=st.mission.text,
            argv=self.argv,
            wisdom_keys=[k for k, _ in st.wisdom.entries],
            material=probe_material(self.channels.material).value,
        )
        try:
            self._loop()
        except SystemExit:
            raise
        except Exception as e:  # the host must never die silently
            log.exception("internal error")
            self.fail(EXIT_TURN_BUDGET, f"internal error: {e!r}", "internal")

    def _loop(self):
        st = self.state
        while True:
            if st.turn >= self.config.max_turns:
                self.fail(EXIT_TURN_BUDGET,
                          f"turn budget exhausted ({self.config.max_turns} turns) without exit",
                          "turn_budget")
            request = self.build_request()
            try:
                response = self.provider.complete(request)
            except GuestError as e:
                self.trace.emit(EventKind.GUEST_CALL, st.turn, messages=len(request.messages),
                                error=str(e))
                self.fail(EXIT_PROVIDER, f"guest unavailable: {e}", "provider")
            except (OSError, ValueError) as e:
                self.trace.emit(EventKind.GUEST_CALL, st.turn, messages=len(request.messages),
                                error=str(e))
                self.fail(EXIT_PROVIDER, f"guest provider failed: {e}", "provider")
            self._after_response(request, response)

    def _after_response(self, request: GuestRequest, response: GuestResponse):
        st = self.state
        turn = st.turn
        usage = response.usage
        self._last_usage = usage.input_tokens + usage.output_tokens if usage else None
        self.trace.emit(
            EventKind.GUEST_CALL, turn,
            messages=len(request.messages),
            roles=[m.role.value for m in request.messages],
            history_ids=[m.tool_call_id or "" for m in request.messages[2:]],
            tool_calls=[c.name for c in response.tool_calls],
            usage=None if usage is None else {"input_tokens": usage.input_tokens,
                                              "output_tokens": usage.output_tokens},
        )
        st.turn += 1
        if not response.tool_calls:
            if response.assistant_text:
                sys.stderr.write(f"quine[{os.getpid()}]: guest: {response.assistant_text.rstrip()}\n")
                sys.stderr.flush()
                st.history.append(response.to_message())
            else:
                self.diag("guest returned neither text nor tool calls (turn counted)")
            return
        st.history.append(response.to_message())
        calls = parse_guest_response(response, self.config.max_children)
        stop = False
        for call in calls:
            if stop:
                st.history.append(Message(
                    Role.TOOL_RESULT,
                    "error: Skipped: not executed because an earlier exec or exit call in the same response took effect",
                    tool_call_id=call.id,
                ))
                continue
            result = self.execute_tool(call)
            if result is not None:
                st.history.append(result)
            if call.name in ("exec", "exit") and call.ok:
                stop = True

    # -- tools ------------------------------------------------------------

    def execute_tool(self, call: ToolCall) -> Message | None:
        turn = self.state.turn - 1 if self.state.turn else 0
        if not call.ok:
            self.trace.emit(EventKind.TOOL_START, turn, tool=call.name, call_id=call.id)
            self.trace.emit(EventKind.TOOL_END, turn, tool=call.name, call_id=call.id,
                            error=f"MalformedToolArguments: {call.error}")
            return self._result(call, f"error: MalformedToolArguments: {call.error}")
        action = call.action
        self.trace.emit(EventKind.TOOL_START, turn, tool=call.name, call_id=call.id,
                        **_summary(action))
        try:
            if isinstance(action, ShCall):
                text = self._sh(action, call, turn)
            elif isinstance(action, ForkCall):
                text = self._fork(action, call, turn)
            elif isinstance(action, ExecCall):
                text = self._exec(action, call, turn)
            else:
                self._exit(action.status, action.message, "guest")
        except ToolError as e:
            self.trace.emit(EventKind.TOOL_END, turn, tool=call.name, call_id=call.id,
                            error=f"{e.kind}: {e}")
            return self._result(call, e.render())
        return self._result(call, text)

    @staticmethod
    def _result(call: ToolCall, text: str) -> Message:
        return Message(Role.TOOL_RESULT, text, tool_call_id=call.id)

    def _sh(self, action: ShCall, call: ToolCall, turn: int) -> str:
        try:
            res = tools.run_sh(action, self.channels, self.shell_env(), self.config.caps.sh)
        except SpawnFailure as e:
            raise _SpawnError(str(e)) from None
        self.trace.emit(EventKind.TOOL_END, turn, tool="sh", call_id=call.id,
                        exit_status=res.exit_status, signal=res.signal, timed_out=res.timed_out,
                        stdout_truncated=res.stdout_truncated,
                        stderr_truncated=res.stderr_truncated, duration_ms=res.duration_ms)
        return res.render()

    def _fork(self, action: ForkCall, call: ToolCall, turn: int) -> str:
        def on_spawn(index, spec, pid):
            self.trace.emit(EventKind.FORK_CHILD, turn, call_id=call.id, index=index,
                            child_pid=pid, mission=spec.mission, wait=action.wait,
                            spawned=pid is not None)

        results = tools.do_fork(action, self.config.self_image, self.child_env(),
                                caps=self.config.caps, jobs=self.jobs, on_spawn=on_spawn)
        if action.wait:
            self.trace.emit(EventKind.TOOL_END, turn, tool="fork", call_id=call.id,
                            exit_statuses=[o.exit_status for o in results],
                            pids=[o.pid for o in results])
            return tools.render_outcomes(results)
        lines = [f"children: {len(results)} (background)"]
        for r in results:
            if isinstance(r, tools.JobHandle):
                lines.append(f"[{r.index}] job {r.id} pid {r.pid} running; its result will be reported in a later message")
            else:
                lines.append(r.render())
        self.trace.emit(EventKind.TOOL_END, turn, tool="fork", call_id=call.id,
                        jobs=[getattr(r, "id", None) for r in results])
        return "\n".join(lines)

    def _exec(self, action: ExecCall, call: ToolCall, turn: int) -> str:
        st = self.state

        def before_exec(new_env: dict[str, str]) -> None:
            killed = self.jobs.terminate_all()
            self.trace.emit(EventKind.EXEC_BOUNDARY, turn, call_id=call.id,
                            wisdom_keys=[k for k, _ in action.wisdom],
                            next_generation=int(new_env[GENERATION_VAR]),
                            killed_children=killed)

        tools.do_exec(action, st.mission, self.env, self_image=self.config.self_image,
                      argv=self.argv, before_exec=before_exec)
        raise AssertionError("unreachable")  # pragma: no cover


class _SpawnError(ToolError):
    kind = "SpawnFailure"


def _summary(action) -> dict:
    if isinstance(action, ShCall):
        return {"command": action.command[:200]}
    if isinstance(action, ForkCall):
        return {"children": len(action.children), "wait": action.wait}
    if isinstance(action, ExecCall):
        return {"wisdom_keys": [k for k, _ in action.wisdom]}
    return {"status": action.status}


def run(config: HostConfig, argv: Sequence[str], mission: Mission, env: Mapping[str, str],
        channels: ChannelSet = ChannelSet(), provider=None):
    """Run one agent session to completion.  Always ends in SystemExit."""
    Host(config, argv, mission, env, channels, provider).run()
