"""The four POSIX-named tools: sh, fork, exec, exit."""

from __future__ import annotations

import itertools
import logging
import os
import sys
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

from . import process
from .process import Capture, Child, SpawnFailure, signal_name
from .protocol import (
    GENERATION_VAR,
    ChildSpec,
    ExecCall,
    ExitCall,
    ForkCall,
    Mission,
    ShCall,
    WisdomError,
    WisdomMap,
    validate_wisdom_key,
    validate_wisdom_value,
)

log = logging.getLogger("quine")

SHELL = "/bin/sh"

SH_CAP = 64 * 1024
DELIVERABLE_CAP = 256 * 1024
DIAGNOSTICS_TAIL_CAP = 8 * 1024

SPAWN_FAILURE_STATUS = 127

SESSION_VAR = "QUINE_SESSION_ID"
PARENT_SESSION_VAR = "QUINE_PARENT_SESSION"


class ToolError(Exception):
    """A tool-level failure that is reported back to the Guest."""

    kind = "ToolError"

    def render(self) -> str:
        return f"error: {self.kind}: {self}"


class ExecFailure(ToolError):
    kind = "ExecFailure"


class UnknownHandle(ToolError):
    kind = "UnknownHandle"


@dataclass(frozen=True)
class Caps:
    sh: int = SH_CAP
    deliverable: int = DELIVERABLE_CAP
    diagnostics_tail: int = DIAGNOSTICS_TAIL_CAP


@dataclass(frozen=True)
class ChannelSet:
    """The runtime's own material/deliverable/diagnostics descriptors."""

    material: int = 0
    deliverable: int = 1
    diagnostics: int = 2

    @property
    def remap(self) -> dict[int, int]:
        """Descriptor plan applied inside every sh invocation."""
        return {3: self.material, 4: self.deliverable, 5: self.diagnostics}


@dataclass(frozen=True)
class ShResult:
    stdout: str
    stderr: str
    exit_status: int
    duration_ms: int
    stdout_truncated: bool = False
    stderr_truncated: bool = False
    signal: int | None = None
    timed_out: bool = False
    stdout_bytes: int = 0
    stderr_bytes: int = 0

    def render(self) -> str:
        head = f"exit_status: {self.exit_status}"
        if self.signal is not None:
            head += f" (killed by {signal_name(self.signal)})"
        if self.timed_out:
            head += " (timed out)"
        return "\n".join([
            head,
            f"duration_ms: {self.duration_ms}",
            _section("stdout", self.stdout, self.stdout_bytes, self.stdout_truncated),
            _section("stderr", self.stderr, self.stderr_bytes, self.stderr_truncated),
        ])


def _section(name: str, text: str, total: int, truncated: bool) -> str:
    label = f"--- {name} ({total} bytes"
    if truncated:
        label += f", truncated to {len(text.encode())}"
    label += ") ---"
    return f"{label}\n{text}" if text else label


def run_sh(
    call: ShCall,
    channels: ChannelSet,
    env: Mapping[str, str],
    cap: int = SH_CAP,
) -> ShResult:
    """Run ``sh -c`` with fds 3/4/5 bound to the runtime's 0/1/2.

    The command's own 0 is /dev/null; its 1 and 2 are captured (bounded).
    Raises SpawnFailure if the shell cannot be started.
    """
    child = process.start_child(
        [SHELL, "-c", call.command],
        env,
        extra_fds=channels.remap,
        stdout_cap=cap,
        stderr_cap=cap,
    )
    timed_out = process.supervise([child], timeout_s=call.timeout_s)
    return ShResult(
        stdout=child.stdout.text(),
        stderr=child.stderr.text(),
        exit_status=child.returncode,
        duration_ms=child.duration_ms,
        stdout_truncated=child.stdout.truncated,
        stderr_truncated=child.stderr.truncated,
        signal=child.term_signal,
        timed_out=timed_out,
        stdout_bytes=child.stdout.total,
        stderr_bytes=child.stderr.total,
    )


# -- fork ---------------------------------------------------------------------


@dataclass(frozen=True)
class ChildOutcome:
    index: int
    mission: str
    pid: int | None
    exit_status: int
    deliverable: str
    diagnostics_tail: str
    deliverable_truncated: bool = False
    diagnostics_truncated: bool = False
    signal: int | None = None
    spawn_error: str | None = None

    def render(self) -> str:
        head = f"[{self.index}] pid {self.pid if self.pid is not None else '-'} exit_status {self.exit_status}"
        if self.signal is not None:
            head += f" (killed by {signal_name(self.signal)})"
        if self.spawn_error:
            head += f" (spawn failed: {self.spawn_error})"
        lines = [head, f"mission: {self.mission}"]
        lines.append(_section("deliverable", self.deliverable,
                              len(self.deliverable.encode()), self.deliverable_truncated))
        lines.append(_section("diagnostics tail", self.diagnostics_tail,
                              len(self.diagnostics_tail.encode()), self.diagnostics_truncated))
        return "\n".join(lines)


def render_outcomes(outcomes: Sequence[ChildOutcome]) -> str:
    return "\n".join([f"children: {len(outcomes)}", *(o.render() for o in outcomes)])


def _outcome(index: int, spec: ChildSpec, child: Child) -> ChildOutcome:
    return ChildOutcome(
        index=index,
        mission=spec.mission,
        pid=child.pid,
        exit_status=child.returncode,
        deliverable=child.stdout.text(),
        diagnostics_tail=child.stderr.text(),
        deliverable_truncated=child.stdout.truncated,
        diagnostics_truncated=child.stderr.truncated,
        signal=child.term_signal,
    )


def _spawn_failed(index: int, spec: ChildSpec, err: Exception) -> ChildOutcome:
    why = str(err)
    return ChildOutcome(
        index=index,
        mission=spec.mission,
        pid=None,
        exit_status=SPAWN_FAILURE_STATUS,
        deliverable="",
        diagnostics_tail=f"quine: fork: {why}\n",
        spawn_error=why,
    )


def child_environment(env: Mapping[str, str], parent_session: str | None = None) -> dict[str, str]:
    """Independent environment copy for a forked child (a new session)."""
    out = dict(env)
    out.pop(SESSION_VAR, None)
    out[GENERATION_VAR] = "0"
    if parent_session:
        out[PARENT_SESSION_VAR] = parent_session
    else:
        out.pop(PARENT_SESSION_VAR, None)
    return out


@dataclass
class JobHandle:
    id: int
    index: int
    spec: ChildSpec
    child: Child

    @property
    def pid(self) -> int:
        return self.child.pid


@dataclass(frozen=True)
class Running:
    handle_id: int
    pid: int


@dataclass(frozen=True)
class Done:
    handle_id: int
    outcome: ChildOutcome


@dataclass
class JobTable:
    """Background children started by ``fork(wait=false)``."""

    jobs: dict[int, JobHandle] = field(default_factory=dict)
    _ids: itertools.count = field(default_factory=lambda: itertools.count(1))

    def add(self, index: int, spec: ChildSpec, child: Child) -> JobHandle:
        h = JobHandle(next(self._ids), index, spec, child)
        self.jobs[h.id] = h
        return h

    def pump(self) -> None:
        """Move pending pipe data without blocking, so background children never stall."""
        if self.jobs:
            process.pump([h.child for h in self.jobs.values()])

    def terminate_all(self) -> list[int]:
        killed = []
        for h in list(self.jobs.values()):
            process.terminate(h.child, grace_s=0.2)
            h.child.close()
            killed.append(h.pid)
        self.jobs.clear()
        return killed

    def __len__(self) -> int:
        return len(self.jobs)


def do_fork(
    call: ForkCall,
    self_image: Sequence[str],
    env: Mapping[str, str],
    *,
    caps: Caps = Caps(),
    jobs: JobTable | None = None,
    on_spawn: Callable[[int, ChildSpec, int | None], None] | None = None,
) -> list:
    """Spawn one copy of ``self_image`` per child with argv = its mission.

    wait=True: block (draining all pipes concurrently) and return
    ChildOutcomes in request order.  wait=False: return JobHandles
    registered in ``jobs``; children that failed to spawn still come back as
    ChildOutcomes.
    """
    if not call.wait and jobs is None:
        raise ValueError("fork(wait=false) needs a JobTable")
    started: list[tuple[int, ChildSpec, Child | ChildOutcome]] = []
    for i, spec in enumerate(call.children):
        material = spec.material.encode() if spec.material is not None else None
        try:
            child = process.start_child(
                [*self_image, spec.mission],
                env,
                stdin=material,
                stdout_cap=caps.deliverable,
                stderr_cap=caps.diagnostics_tail,
                stderr_keep="tail",
            )
        except (SpawnFailure, OSError) as e:
            log.warning("fork: child %d failed to spawn: %s", i, e)
            if on_spawn:
                on_spawn(i, spec, None)
            started.append((i, spec, _spawn_failed(i, spec, e)))
            continue
        if on_spawn:
            on_spawn(i, spec, child.pid)
        started.append((i, spec, child))

    if not call.wait:
        return [
            jobs.add(i, spec, c) if isinstance(c, Child) else c
            for i, spec, c in started
        ]

    live = [c for _, _, c in started if isinstance(c, Child)]
    process.supervise(live)
    return [
        _outcome(i, spec, c) if isinstance(c, Child) else c
        for i, spec, c in started
    ]


def poll_job(handle_id: int, jobs: JobTable) -> Running | Done:
    """Non-blocking status check; Done consumes the handle and reaps the child."""
    h = jobs.jobs.get(handle_id)
    if h is None:
        raise UnknownHandle(f"no job with handle {handle_id}")
    process.pump([h.child])
    if not h.child.try_reap():
        return Running(handle_id, h.pid)
    process.supervise([h.child])
    del jobs.jobs[handle_id]
    return Done(handle_id, _outcome(h.index, h.spec, h.child))


# -- exec / exit --------------------------------------------------------------


def prepare_exec_env(call: ExecCall, env: Mapping[str, str]) -> dict[str, str]:
    """Environment for the next generation: new wisdom, generation + 1."""
    current = WisdomMap.decode(env)
    for k, v in call.wisdom:
        validate_wisdom_key(k)
        validate_wisdom_value(k, v)
    return current.renewed(dict(call.wisdom)).encode(env)


def do_exec(
    call: ExecCall,
    mission: Mission,
    env: Mapping[str, str],
    *,
    self_image: Sequence[str],
    argv: Sequence[str],
    before_exec: Callable[[dict[str, str]], None] | None = None,
):
    """Replace the process image with ``self_image + argv``.

    Never returns on success.  Raises ExecFailure (process intact) if the
    wisdom is invalid or the image cannot be executed.  ``mission`` must be
    what ``argv`` decodes to; it is checked, not rewritten.
    """
    try:
        new_env = prepare_exec_env(call, env)
    except WisdomError as e:
        raise ExecFailure(str(e)) from None
    path = self_image[0]
    if not (os.path.isfile(path) and os.access(path, os.X_OK)):
        raise ExecFailure(f"self image {path!r} is missing or not executable")
    if not mission.text.strip():
        raise ExecFailure("empty mission")
    if before_exec:
        before_exec(new_env)
    for stream in (sys.stdout, sys.stderr):
        try:
            stream.flush()
        except (OSError, ValueError):
            pass
    try:
        os.execve(path, [*self_image, *argv], new_env)
    except OSError as e:
        raise ExecFailure(f"execve {path}: {e.strerror}") from None


def do_exit(
    call: ExitCall,
    *,
    jobs: JobTable | None = None,
    diagnostics=None,
    finalize: Callable[[int, list[int]], None] | None = None,
):
    """Kill unwaited children, write the message, finalize, and exit."""
    killed = jobs.terminate_all() if jobs else []
    if killed:
        log.info("exit: terminated %d unwaited child(ren): %s", len(killed), killed)
    if call.message:
        out = diagnostics or sys.stderr
        msg = call.message if call.message.endswith("\n") else call.message + "\n"
        try:
            out.write(msg)
            out.flush()
        except (OSError, ValueError):
            pass
    if finalize:
        finalize(call.status, killed)
    raise SystemExit(call.status)
