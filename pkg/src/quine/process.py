"""Low-level spawn and supervision.

Children are started with ``os.posix_spawn`` and an explicit descriptor
plan, then drained and reaped from a single ``selectors`` loop so that a
full pipe can never wedge the parent while it waits.
"""

from __future__ import annotations

import errno
import fcntl
import os
import selectors
import signal
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

# Sources are relocated at or above this before dup2 so that no source can be
# overwritten by an earlier dup2 in the plan.
_SAFE_FD_FLOOR = 10

# How long to keep reading after the main child died (background jobs may
# still hold the pipe).
_ORPHAN_GRACE_S = 0.1
_TERM_GRACE_S = 0.5


class SpawnFailure(OSError):
    pass


def signal_name(signum: int) -> str:
    try:
        return signal.Signals(signum).name
    except ValueError:
        return f"SIG{signum}"


@dataclass
class Capture:
    """Bounded byte sink.  ``keep='head'`` keeps the first ``cap`` bytes,
    ``keep='tail'`` the last."""

    cap: int
    keep: str = "head"
    data: bytearray = field(default_factory=bytearray)
    total: int = 0

    @property
    def truncated(self) -> bool:
        return self.total > self.cap

    def feed(self, chunk: bytes) -> None:
        self.total += len(chunk)
        if self.keep == "head":
            room = self.cap - len(self.data)
            if room > 0:
                self.data += chunk[:room]
        else:
            self.data += chunk
            if len(self.data) > self.cap:
                del self.data[: len(self.data) - self.cap]

    def text(self) -> str:
        return self.data.decode("utf-8", errors="replace")


def spawn(
    argv: Sequence[str],
    env: Mapping[str, str],
    fd_plan: Mapping[int, int],
    *,
    new_session: bool = True,
) -> int:
    """Start ``argv`` with ``fd_plan`` (target fd -> source fd in this process).

    Only the planned targets are open in the child (plus anything the parent
    inherited without CLOEXEC).  Returns the pid.
    """
    path = argv[0]
    relocated: dict[int, int] = {}
    try:
        for target, source in fd_plan.items():
            relocated[target] = fcntl.fcntl(source, fcntl.F_DUPFD_CLOEXEC, _SAFE_FD_FLOOR)
        actions = [(os.POSIX_SPAWN_DUP2, src, target) for target, src in relocated.items()]
        try:
            return os.posix_spawn(
                path, list(argv), dict(env),
                file_actions=actions,
                setsid=new_session,
                # Python ignores SIGPIPE; children must not inherit that.
                setsigdef=(signal.SIGPIPE, signal.SIGXFSZ),
            )
        except OSError as e:
            raise SpawnFailure(e.errno, f"cannot spawn {path}: {e.strerror}") from None
    finally:
        for fd in relocated.values():
            os.close(fd)


@dataclass
class Child:
    """A spawned process whose pipes we own."""

    pid: int
    stdout_fd: int | None
    stderr_fd: int | None
    stdout: Capture
    stderr: Capture
    stdin_fd: int | None = None
    stdin_data: bytes = b""
    wait_status: int | None = None
    started: float = field(default_factory=time.monotonic)
    ended: float | None = None

    @property
    def done(self) -> bool:
        return self.wait_status is not None

    @property
    def returncode(self) -> int | None:
        """Shell-style status: exit code, or 128+signum when killed."""
        if self.wait_status is None:
            return None
        code = os.waitstatus_to_exitcode(self.wait_status)
        return code if code >= 0 else 128 - code

    @property
    def term_signal(self) -> int | None:
        if self.wait_status is not None and os.WIFSIGNALED(self.wait_status):
            return os.WTERMSIG(self.wait_status)
        return None

    @property
    def duration_ms(self) -> int:
        end = self.ended if self.ended is not None else time.monotonic()
        return max(0, int((end - self.started) * 1000))

    def try_reap(self) -> bool:
        if self.wait_status is not None:
            return True
        try:
            pid, status = os.waitpid(self.pid, os.WNOHANG)
        except ChildProcessError:
            # Reaped elsewhere; treat as lost.
            self.wait_status = 0xFF00
            self.ended = time.monotonic()
            return True
        if pid == 0:
            return False
        self.wait_status = status
        self.ended = time.monotonic()
        return True

    def reap(self) -> None:
        if self.wait_status is None:
            try:
                _, self.wait_status = os.waitpid(self.pid, 0)
            except ChildProcessError:
                self.wait_status = 0xFF00
            self.ended = time.monotonic()

    def kill_group(self, sig: int = signal.SIGKILL) -> None:
        try:
            os.killpg(self.pid, sig)
        except (ProcessLookupError, PermissionError):
            try:
                os.kill(self.pid, sig)
            except ProcessLookupError:
                pass

    def close(self) -> None:
        for name in ("stdout_fd", "stderr_fd", "stdin_fd"):
            fd = getattr(self, name)
            if fd is not None:
                try:
                    os.close(fd)
                except OSError:
                    pass
                setattr(self, name, None)


def start_child(
    argv: Sequence[str],
    env: Mapping[str, str],
    *,
    stdin: bytes | None = None,
    extra_fds: Mapping[int, int] | None = None,
    stdout_cap: int,
    stderr_cap: int,
    stderr_keep: str = "head",
) -> Child:
    """Spawn with piped stdout/stderr; stdin is a pipe fed ``stdin`` or /dev/null."""
    out_r, out_w = os.pipe()
    err_r, err_w = os.pipe()
    in_r = in_w = None
    if stdin is None:
        in_r = os.open(os.devnull, os.O_RDONLY | os.O_CLOEXEC)
    else:
        in_r, in_w = os.pipe()
    plan = {0: in_r, 1: out_w, 2: err_w}
    plan.update(extra_fds or {})
    try:
        pid = spawn(argv, env, plan)
    except BaseException:
        for fd in (out_r, out_w, err_r, err_w, in_r, in_w):
            if fd is not None:
                os.close(fd)
        raise
    for fd in (out_w, err_w, in_r):
        os.close(fd)
    if in_w is not None and not stdin:
        os.close(in_w)
        in_w = None
    return Child(
        pid=pid,
        stdout_fd=out_r,
        stderr_fd=err_r,
        stdout=Capture(stdout_cap),
        stderr=Capture(stderr_cap, stderr_keep),
        stdin_fd=in_w,
        stdin_data=stdin or b"",
    )


class _Mux:
    """Selector over the pipes of several children."""

    def __init__(self, children: Sequence[Child]):
        self.sel = selectors.DefaultSelector()
        self.owners: dict[int, tuple[Child, str]] = {}
        for ch in children:
            for attr, events in (("stdout_fd", selectors.EVENT_READ),
                                 ("stderr_fd", selectors.EVENT_READ),
                                 ("stdin_fd", selectors.EVENT_WRITE)):
                fd = getattr(ch, attr)
                if fd is not None:
                    os.set_blocking(fd, False)
                    self.sel.register(fd, events)
                    self.owners[fd] = (ch, attr)

    def drop(self, fd: int) -> None:
        ch, attr = self.owners.pop(fd)
        self.sel.unregister(fd)
        os.close(fd)
        setattr(ch, attr, None)

    def step(self, wait: float) -> int:
        """Service ready descriptors once; returns how many were ready."""
        ready = self.sel.select(wait)
        for key, _ in ready:
            fd = key.fd
            if fd not in self.owners:
                continue
            ch, attr = self.owners[fd]
            if attr == "stdin_fd":
                try:
                    n = os.write(fd, ch.stdin_data[:65536])
                except BrokenPipeError:
                    self.drop(fd)
                    continue
                except BlockingIOError:
                    continue
                ch.stdin_data = ch.stdin_data[n:]
                if not ch.stdin_data:
                    self.drop(fd)
                continue
            try:
                chunk = os.read(fd, 65536)
            except BlockingIOError:
                continue
            except OSError as e:
                if e.errno != errno.EIO:
                    raise
                chunk = b""
            if chunk:
                (ch.stdout if attr == "stdout_fd" else ch.stderr).feed(chunk)
            else:
                self.drop(fd)
        return len(ready)

    def close(self, drop_all: bool) -> None:
        if drop_all:
            for fd in list(self.owners):
                self.drop(fd)
        self.sel.close()


def pump(children: Sequence[Child], max_rounds: int = 64) -> None:
    """Move whatever pipe data is ready right now, without blocking."""
    mux = _Mux(children)
    try:
        for _ in range(max_rounds):
            if not mux.owners or not mux.step(0):
                break
    finally:
        mux.close(drop_all=False)


def supervise(children: Sequence[Child], timeout_s: float | None = None) -> bool:
    """Drain every child's pipes and reap them all.

    Returns True if the deadline expired and the stragglers' process groups
    were killed.
    """
    deadline = None if timeout_s is None else time.monotonic() + timeout_s
    mux = _Mux(children)
    exited_at: dict[int, float] = {}
    timed_out = False
    try:
        while mux.owners:
            now = time.monotonic()
            if deadline is not None and now >= deadline and not timed_out:
                timed_out = True
                for ch in children:
                    if not ch.try_reap():
                        terminate(ch)
            # Child gone but its pipe still held by a stray background job.
            for fd in list(mux.owners):
                ch, _ = mux.owners[fd]
                if ch.pid in exited_at and now - exited_at[ch.pid] > _ORPHAN_GRACE_S:
                    mux.drop(fd)
            if not mux.owners:
                break
            wait = 0.05
            if deadline is not None and not timed_out:
                wait = max(0.0, min(wait, deadline - now))
            mux.step(wait)
            for ch in children:
                if ch.pid not in exited_at and ch.try_reap():
                    exited_at[ch.pid] = time.monotonic()
    finally:
        mux.close(drop_all=True)
    for ch in children:
        if timed_out and not ch.try_reap():
            terminate(ch)
        ch.reap()
    return timed_out


def terminate(child: Child, grace_s: float = _TERM_GRACE_S) -> None:
    """SIGTERM the child's process group, SIGKILL after a grace period, reap."""
    if child.try_reap():
        child.kill_group(signal.SIGKILL)  # leftovers in the group
        return
    child.kill_group(signal.SIGTERM)
    end = time.monotonic() + grace_s
    while time.monotonic() < end:
        if child.try_reap():
            break
        time.sleep(0.01)
    child.kill_group(signal.SIGKILL)
    child.reap()
