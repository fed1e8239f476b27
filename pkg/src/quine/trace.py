"""Per-session event log and process-tree reconstruction.

One file per session, ``<trace_dir>/<session_id>.qtrace``.  The first line
is a header; every following line is one event.  Both are JSON objects.
Across exec the new image reopens the same file (the session id travels in
``QUINE_SESSION_ID``) and keeps appending, so generations show up as a
changing ``generation`` field inside one file.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import secrets
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator

log = logging.getLogger("quine")

SCHEMA = "quine-trace/1"
SUFFIX = ".qtrace"
TRACE_DIR_VAR = "QUINE_TRACE_DIR"


class EventKind(str, enum.Enum):
    START = "Start"
    GUEST_CALL = "GuestCall"
    TOOL_START = "ToolStart"
    TOOL_END = "ToolEnd"
    FORK_CHILD = "ForkChild"
    EXEC_BOUNDARY = "ExecBoundary"
    EXIT = "Exit"


class TraceFinalized(RuntimeError):
    pass


def now_ms() -> int:
    # CLOCK_MONOTONIC is system-wide, so it stays monotonic across execve.
    return int(time.monotonic() * 1000)


def new_session_id(pid: int | None = None) -> str:
    pid = os.getpid() if pid is None else pid
    return f"{pid}-{int(time.time() * 1000)}-{secrets.token_hex(3)}"


@dataclass(frozen=True)
class TraceEvent:
    kind: EventKind
    payload: dict = field(default_factory=dict)
    timestamp: int = field(default_factory=now_ms)


@dataclass
class SessionTrace:
    """Append-only event log of one session.

    With ``path=None`` events are only kept in memory.
    """

    session_id: str
    pid: int
    parent_pid: int
    generation: int = 0
    path: Path | None = None
    parent_session: str | None = None
    events: list[dict] = field(default_factory=list)
    finalized: bool = False
    _fd: int | None = None

    @classmethod
    def open(
        cls,
        trace_dir: str | os.PathLike | None,
        *,
        session_id: str,
        generation: int,
        mission: str,
        argv: list[str],
        parent_session: str | None = None,
    ) -> "SessionTrace":
        pid, ppid = os.getpid(), os.getppid()
        path = Path(trace_dir) / f"{session_id}{SUFFIX}" if trace_dir else None
        tr = cls(session_id, pid, ppid, generation, path, parent_session)
        if path is not None:
            try:
                path.parent.mkdir(parents=True, exist_ok=True)
                fresh = not path.exists()
                tr._fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_APPEND | os.O_CLOEXEC, 0o644)
                if fresh:
                    tr._write({
                        "schema": SCHEMA,
                        "session_id": session_id,
                        "pid": pid,
                        "parent_pid": ppid,
                        "parent_session": parent_session,
                        "mission": mission,
                        "argv": list(argv),
                    })
            except OSError as e:
                tr._degrade(e)
        return tr

    def _degrade(self, err: OSError) -> None:
        print(f"quine[{self.pid}]: warning: trace disabled: {err}", file=sys.stderr, flush=True)
        if self._fd is not None:
            try:
                os.close(self._fd)
            except OSError:
                pass
        self._fd = None
        self.path = None

    def _write(self, obj: dict) -> None:
        if self._fd is None:
            return
        line = (json.dumps(obj, ensure_ascii=False, separators=(",", ":")) + "\n").encode()
        try:
            # O_APPEND + one write per line keeps every prefix decodable.
            os.write(self._fd, line)
        except OSError as e:
            self._degrade(e)

    def record(self, event: TraceEvent, turn: int | None = None) -> dict:
        if self.finalized:
            raise TraceFinalized(f"session {self.session_id} already exited")
        rec: dict[str, Any] = {
            "kind": event.kind.value,
            "ts": event.timestamp,
            "pid": self.pid,
            "generation": self.generation,
        }
        if turn is not None:
            rec["turn"] = turn
        rec["payload"] = event.payload
        self.events.append(rec)
        self._write(rec)
        if event.kind is EventKind.EXIT:
            self.finalized = True
        return rec

    def emit(self, kind: EventKind, turn: int | None = None, **payload) -> dict:
        return self.record(TraceEvent(kind, payload), turn)

    def close(self) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None


# -- reading ------------------------------------------------------------------


@dataclass
class SessionFile:
    path: Path
    header: dict
    events: list[dict]
    corrupt_lines: int = 0

    @property
    def session_id(self) -> str:
        return self.header.get("session_id") or self.path.stem

    @property
    def pid(self) -> int | None:
        return self.header.get("pid")

    @property
    def generations(self) -> int:
        gens = {e.get("generation", 0) for e in self.events}
        return max(gens) + 1 if gens else 1

    @property
    def exec_boundaries(self) -> list[dict]:
        return [e for e in self.events if e.get("kind") == EventKind.EXEC_BOUNDARY.value]

    @property
    def exit_status(self) -> int | None:
        for e in reversed(self.events):
            if e.get("kind") == EventKind.EXIT.value:
                return e["payload"].get("status")
        return None

    def of_kind(self, kind: EventKind) -> list[dict]:
        return [e for e in self.events if e.get("kind") == kind.value]


def read_session(path: str | os.PathLike) -> SessionFile:
    """Parse one trace file; unparseable lines are skipped and counted."""
    path = Path(path)
    header: dict = {}
    events: list[dict] = []
    bad = 0
    with open(path, encoding="utf-8", errors="replace") as fh:
        for i, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict):
                    raise ValueError("not an object")
            except ValueError:
                bad += 1
                continue
            if i == 0 and rec.get("schema"):
                header = rec
            elif "kind" in rec:
                events.append(rec)
            else:
                bad += 1
    return SessionFile(path, header, events, bad)


def iter_sessions(trace_dir: str | os.PathLike) -> Iterator[SessionFile]:
    for p in sorted(Path(trace_dir).glob(f"*{SUFFIX}")):
        yield read_session(p)


@dataclass
class TreeNode:
    session_id: str
    pid: int | None
    mission: str
    generations: int
    exit_status: int | None
    children: list["TreeNode"] = field(default_factory=list)
    synthetic: bool = False

    def walk(self) -> Iterator["TreeNode"]:
        yield self
        for c in self.children:
            yield from c.walk()

    @property
    def depth(self) -> int:
        """Number of levels in this subtree (a leaf has depth 1)."""
        return 1 + max((c.depth for c in self.children), default=0)

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "pid": self.pid,
            "mission": self.mission,
            "generations": self.generations,
            "exit_status": self.exit_status,
            "children": [c.to_dict() for c in self.children],
        }


@dataclass
class ProcessTree:
    root: TreeNode
    sessions: dict[str, SessionFile]
    orphans: list[str] = field(default_factory=list)
    corrupt_lines: int = 0

    @property
    def session_count(self) -> int:
        return len(self.sessions)

    @property
    def depth(self) -> int:
        if self.root.synthetic:
            return max((c.depth for c in self.root.children), default=0)
        return self.root.depth

    def levels(self) -> list[int]:
        """Session count per tree level, root level first."""
        out: list[int] = []
        frontier = self.root.children if self.root.synthetic else [self.root]
        while frontier:
            out.append(len(frontier))
            frontier = [c for n in frontier for c in n.children]
        return out


def reconstruct_tree(trace_dir: str | os.PathLike) -> ProcessTree:
    """Rebuild the delegation tree from the trace files in ``trace_dir``.

    A session's parent is the session named in its header; failing that,
    the session whose ForkChild events list its pid.  Sessions with no
    traced parent hang off a synthetic root unless there is exactly one.
    """
    sessions = {s.session_id: s for s in iter_sessions(trace_dir)}
    corrupt = sum(s.corrupt_lines for s in sessions.values())
    if corrupt:
        log.warning("reconstruct_tree: skipped %d corrupt trace line(s)", corrupt)

    forked_by: dict[int, str] = {}
    for sid, s in sessions.items():
        for e in s.of_kind(EventKind.FORK_CHILD):
            cpid = e["payload"].get("child_pid")
            if cpid is not None:
                forked_by[cpid] = sid

    nodes = {
        sid: TreeNode(sid, s.pid, s.header.get("mission", ""), s.generations, s.exit_status)
        for sid, s in sessions.items()
    }
    tops: list[str] = []
    for sid, s in sessions.items():
        parent = s.header.get("parent_session")
        if parent not in sessions:
            parent = forked_by.get(s.pid)
        if parent in sessions and parent != sid:
            nodes[parent].children.append(nodes[sid])
        else:
            tops.append(sid)

    for n in nodes.values():
        n.children.sort(key=lambda c: (c.pid or 0, c.session_id))

    # A top-level session that names a parent it cannot find is an orphan.
    orphans = [sid for sid in tops if sessions[sid].header.get("parent_session")]
    if len(tops) == 1 and not orphans:
        root = nodes[tops[0]]
    else:
        if orphans:
            log.warning("reconstruct_tree: %d orphan session(s) attached to a synthetic root", len(orphans))
        root = TreeNode("<root>", None, "", 0, None, [nodes[t] for t in tops], synthetic=True)
    return ProcessTree(root, sessions, orphans, corrupt)
