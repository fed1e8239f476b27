"""Desk-scale delegation, renewal and shell-composition experiments.

Every experiment runs real process trees of the runtime against a mock
script generated for it, then reads the session traces back.
"""

from __future__ import annotations

import math
import os
import re
import shlex
import subprocess
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from ..guest import mock
from ..host import default_self_image
from ..trace import EventKind, iter_sessions, reconstruct_tree
from .library import (
    UUID_LINE_RE,
    LibrarySpec,
    Manifest,
    StreamSpec,
    generate_library,
    write_stream,
)


@dataclass
class ExperimentReport:
    experiment: str
    ok: bool = False
    checks: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    root_exit_status: int | None = None
    root_stdout: str = ""
    root_stderr: str = ""
    workdir: str = ""
    trace_dir: str = ""
    runtime_s: float = 0.0
    tree: dict | None = None
    failures: list[str] = field(default_factory=list)

    def check(self, name: str, passed: bool) -> bool:
        self.checks[name] = bool(passed)
        return passed

    def finish(self) -> "ExperimentReport":
        self.ok = bool(self.checks) and all(self.checks.values())
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def _env(script: str, trace_dir: str, extra: dict | None = None) -> dict[str, str]:
    env = {k: v for k, v in os.environ.items() if not k.startswith("QUINE_")}
    env.update(QUINE_PROVIDER="mock", QUINE_MOCK_SCRIPT=script, QUINE_TRACE_DIR=trace_dir)
    env.update(extra or {})
    return env


def _workdir(workdir: str | os.PathLike | None, prefix: str) -> Path:
    if workdir is None:
        return Path(tempfile.mkdtemp(prefix=f"quine-{prefix}-"))
    p = Path(workdir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _exact(text: str) -> str:
    return "^" + re.escape(text) + "$"


def _alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    # A zombie still answers kill(0); check its state.
    try:
        with open(f"/proc/{pid}/stat") as fh:
            return fh.read().rsplit(")", 1)[1].split()[0] != "Z"
    except OSError:
        return False


# -- fractal ------------------------------------------------------------------


def _chunks(items: Sequence[str], n: int) -> list[list[str]]:
    n = max(1, min(n, len(items)))
    size = math.ceil(len(items) / n)
    return [list(items[i:i + size]) for i in range(0, len(items), size)]


def search_mission(dirs: Sequence[str], results: str) -> str:
    return (f"Search the library directories {' '.join(dirs)} for something non-random. "
            f"If found, write the full filepath to stdout and append it to {results}.")


def root_mission(root: str) -> str:
    return (f"Search the library at {root} for the volume with non-random content. "
            "Write its full filepath to stdout.")


def fractal_plan(manifest: Manifest, fanout: int, recurse: int, results: str) -> tuple[list[dict], int, int]:
    """Mock rules for the delegation plan, plus predicted (sessions, depth)."""
    uuid_re = shlex.quote(UUID_LINE_RE)
    groups = _chunks(manifest.hex_dirs(), fanout)
    root = manifest.root
    rules = []
    sessions = 1 + len(groups)
    depth = 2
    child_missions = []
    for i, dirs in enumerate(groups):
        mission = search_mission(dirs, results)
        child_missions.append(mission)
        if i < recurse:
            shelves = [s for d in dirs for s in manifest.shelf_dirs(d)]
            shelf_groups = _chunks(shelves, 16)
            grand = [search_mission(g, results) for g in shelf_groups]
            sessions += len(grand)
            depth = 3
            rules.append(mock.rule(_exact(mission), [
                mock.sh("ls " + " ".join(map(shlex.quote, dirs))),
                mock.fork(*grand),
                mock.exit_(0),
            ]))
            for g, m in zip(shelf_groups, grand):
                rules.append(mock.rule(_exact(m), _leaf_search(g, results, uuid_re)))
        else:
            rules.append(mock.rule(_exact(mission), _leaf_search(dirs, results, uuid_re)))
    rules.insert(0, mock.rule(_exact(root_mission(root)), [
        mock.sh(f"ls {shlex.quote(root)}"),
        mock.fork(*child_missions),
        mock.sh(f"sort -u {shlex.quote(results)} >&4"),
        mock.exit_(0),
    ]))
    return rules, sessions, depth


def _leaf_search(dirs: Sequence[str], results: str, uuid_re: str) -> list[dict]:
    targets = " ".join(map(shlex.quote, dirs))
    return [
        mock.sh(f"grep -rlvE {uuid_re} {targets} | tee -a {shlex.quote(results)} >&4; true"),
        mock.exit_(0),
    ]


def run_fractal_experiment(
    spec: LibrarySpec,
    fanout: int,
    *,
    recurse: int = 0,
    workdir: str | os.PathLike | None = None,
    self_image: Sequence[str] | None = None,
    timeout_s: float = 120,
) -> ExperimentReport:
    """Root forks ``fanout`` searchers over disjoint hex groups; the first
    ``recurse`` of them fork again, one grandchild per group of shelves."""
    if fanout < 1:
        raise ValueError("fanout must be positive")
    work = _workdir(workdir, "fractal")
    manifest = generate_library(spec, work / "library")
    results = str(work / "results.txt")
    Path(results).touch()
    trace_dir = str(work / "traces")
    rules, expect_sessions, expect_depth = fractal_plan(manifest, min(fanout, 16), recurse, results)
    script = mock.write_script(work / "mock.json", rules)
    image = list(self_image or default_self_image())

    rep = ExperimentReport("fractal", workdir=str(work), trace_dir=trace_dir)
    t0 = time.monotonic()
    proc = subprocess.run(
        [*image, root_mission(manifest.root)],
        env=_env(script, trace_dir), stdin=subprocess.DEVNULL,
        capture_output=True, text=True, timeout=timeout_s,
    )
    rep.runtime_s = round(time.monotonic() - t0, 3)
    rep.root_exit_status = proc.returncode
    rep.root_stdout, rep.root_stderr = proc.stdout, proc.stderr

    tree = reconstruct_tree(trace_dir)
    rep.tree = tree.root.to_dict()
    statuses = {sid: s.exit_status for sid, s in tree.sessions.items()}
    rep.failures = [f"{sid}: exit {st}" for sid, st in statuses.items() if st != 0]
    pids = [s.pid for s in tree.sessions.values()]
    rep.metrics = {
        "needle_path": manifest.needle_path,
        "files": spec.file_count,
        "session_count": tree.session_count,
        "expected_session_count": expect_sessions,
        "tree_depth": tree.depth,
        "expected_tree_depth": expect_depth,
        "levels": tree.levels(),
        "orphans": len(tree.orphans),
    }
    rep.check("needle_found", proc.stdout == manifest.needle_path + "\n")
    rep.check("root_exit_0", proc.returncode == 0)
    rep.check("session_count", tree.session_count == expect_sessions)
    rep.check("tree_depth", tree.depth == expect_depth)
    rep.check("all_sessions_exited", all(st is not None for st in statuses.values()))
    rep.check("all_reaped", not any(_alive(p) for p in pids if p))
    rep.check("no_orphans", not tree.orphans)
    return rep.finish()


# -- streaming ----------------------------------------------------------------

READ_SEGMENT = "IFS= read -r seg <&3"


def streaming_plan(spec: StreamSpec, renewal_every: int) -> tuple[list[list[dict]], int]:
    """Per-generation mock responses: one segment read per turn, exec every
    ``renewal_every`` segments, emit the needle and exit when it is read."""
    consumed = spec.needle_index + 1
    gens = math.ceil(consumed / renewal_every)
    plan = []
    for g in range(gens):
        start, end = g * renewal_every, min((g + 1) * renewal_every, consumed)
        turns = []
        for j in range(start, end):
            if j == spec.needle_index:
                turns.append(mock.sh(f"{READ_SEGMENT} && printf '%s\\n' \"$seg\" >&4"))
                turns.append(mock.exit_(0))
            else:
                turns.append(mock.sh(f"{READ_SEGMENT} && printf '%s' \"$seg\" | cut -d' ' -f1-4"))
        if end < consumed:
            turns.append(mock.exec_({
                "found_count": "0",
                "current_position": f"segment {end}",
                "partial_content": f"segments 0-{end - 1} scanned, no match",
            }))
        plan.append(turns)
    return plan, gens


def run_streaming_experiment(
    spec: StreamSpec,
    renewal_every: int,
    *,
    workdir: str | os.PathLike | None = None,
    self_image: Sequence[str] | None = None,
    material: str = "pipe",
    timeout_s: float = 60,
) -> ExperimentReport:
    if renewal_every < 1:
        raise ValueError("renewal_every must be positive")
    work = _workdir(workdir, "stream")
    stream_path = work / "stream.txt"
    segments = write_stream(spec, stream_path)
    trace_dir = str(work / "traces")
    mission = "Find the short essay about distance in the stream and output it."
    plan, expect_gens = streaming_plan(spec, renewal_every)
    script = mock.write_script(work / "mock.json", [mock.rule(_exact(mission), generations=plan)])
    log_path = str(work / "requests.jsonl")
    image = list(self_image or default_self_image())

    rep = ExperimentReport("streaming", workdir=str(work), trace_dir=trace_dir)
    env = _env(script, trace_dir, {"QUINE_MOCK_LOG": log_path})
    t0 = time.monotonic()
    if material == "pipe":
        data = stream_path.read_bytes()
        proc = subprocess.run([*image, mission], env=env, input=data, capture_output=True,
                              timeout=timeout_s)
    else:
        with open(stream_path, "rb") as fh:
            proc = subprocess.run([*image, mission], env=env, stdin=fh, capture_output=True,
                                  timeout=timeout_s)
    rep.runtime_s = round(time.monotonic() - t0, 3)
    rep.root_exit_status = proc.returncode
    rep.root_stdout = proc.stdout.decode(errors="replace")
    rep.root_stderr = proc.stderr.decode(errors="replace")

    sessions = list(iter_sessions(trace_dir))
    rep.check("single_session", len(sessions) == 1)
    s = sessions[0] if sessions else None
    pids = {e["pid"] for e in s.events} if s else set()
    starts = s.of_kind(EventKind.START) if s else []
    argvs = {tuple(e["payload"]["argv"]) for e in starts}
    generations = s.generations if s else 0
    rep.metrics = {
        "segments": spec.segment_count,
        "needle_index": spec.needle_index,
        "renewal_every": renewal_every,
        "generations_used": generations,
        "expected_generations": expect_gens,
        "exec_cycles": len(s.exec_boundaries) if s else 0,
        "pids": sorted(pids),
    }
    rep.check("answer_correct", rep.root_stdout == segments[spec.needle_index] + "\n")
    rep.check("generations", generations == expect_gens)
    rep.check("pid_constant", len(pids) == 1 and s is not None and s.pid in pids)
    rep.check("argv_constant", len(argvs) == 1)
    rep.check("root_exit_0", proc.returncode == 0)
    return rep.finish()


# -- shell compositions ---------------------------------------------------------

AUTH_PATTERN = "authentication failure"


def make_server_log(path: str | os.PathLike, lines: int = 1000, seed: int = 0) -> None:
    import random

    rng = random.Random(seed)
    users = ["alice", "bob", "carol", "dave", "erin"]
    hosts = ["10.0.0.1", "10.0.0.2", "10.0.0.7", "192.168.1.4"]
    out = []
    for i in range(lines):
        r = rng.random()
        u, h = rng.choice(users), rng.choice(hosts)
        if r < 0.15:
            out.append(f"sshd: {AUTH_PATTERN} for user {u} from {h}")
        elif r < 0.2:
            out.append(f"sshd: note: previous {AUTH_PATTERN} cleared for {u}")
        elif r < 0.6:
            out.append(f"sshd: accepted publickey for {u} from {h}")
        else:
            out.append(f"cron[{rng.randrange(100, 999)}]: job {rng.randrange(10)} finished in {rng.randrange(50)}ms")
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


FILTER_MISSION = "Extract lines indicating auth failures"
FILTER_SCRIPT = f"grep '{AUTH_PATTERN} for user' <&3 >&4 || [ $? -eq 1 ]"


def filter_rules() -> list[dict]:
    return [mock.rule(_exact(FILTER_MISSION), [mock.sh(FILTER_SCRIPT), mock.exit_(0)])]


def _run_sh(cmd: str, env: dict, timeout_s: float = 60) -> subprocess.CompletedProcess:
    return subprocess.run(["/bin/sh", "-c", cmd], env=env, capture_output=True, timeout=timeout_s)


def _quine_cmd(image: Sequence[str], mission: str) -> str:
    return " ".join(shlex.quote(x) for x in [*image, mission])


def run_filter_pipeline(work: Path, image: Sequence[str], lines: int = 1000) -> dict:
    log_path = work / "server.log"
    make_server_log(log_path, lines)
    script = mock.write_script(work / "filter.json", filter_rules())
    env = _env(script, str(work / "traces-filter"))
    f = shlex.quote(str(log_path))
    t0 = time.monotonic()
    got = _run_sh(f"cat {f} | {_quine_cmd(image, FILTER_MISSION)} | sort | uniq -c", env)
    elapsed = time.monotonic() - t0
    want = _run_sh(f"cat {f} | grep '{AUTH_PATTERN} for user' | sort | uniq -c", env)
    return {
        "identical": got.stdout == want.stdout and got.returncode == 0,
        "bytes": len(got.stdout),
        "runtime_s": round(elapsed, 3),
        "stdout": got.stdout.decode(),
        "oracle": want.stdout.decode(),
    }


CHAIN_MISSIONS = (
    "Identify the changed components",
    "Assess risk level for each change",
    "Generate a review checklist",
)


def make_diff(path: str | os.PathLike) -> None:
    files = ["src/auth/login.py", "src/auth/session.py", "docs/index.md", "tests/test_login.py"]
    chunks = []
    for f in files:
        chunks.append(f"diff --git a/{f} b/{f}\n--- a/{f}\n+++ b/{f}\n@@ -1 +1 @@\n-old\n+new\n")
    Path(path).write_text("".join(chunks), encoding="utf-8")


def chain_rules(work: Path) -> list[dict]:
    stage_cmds = [
        "sed -n 's#^diff --git a/.* b/##p'",
        "while IFS= read -r f; do case $f in src/auth/*) r=high;; tests/*) r=low;; *) r=medium;; esac; "
        "printf '%s: %s\\n' \"$f\" \"$r\"; done",
        "sed 's/^/- [ ] review /'",
    ]
    rules = []
    for i, (m, cmd) in enumerate(zip(CHAIN_MISSIONS, stage_cmds), 1):
        copy = shlex.quote(str(work / f"stage{i}.in"))
        rules.append(mock.rule(_exact(m), [
            mock.sh(f"tee {copy} <&3 | {cmd} >&4"),
            mock.exit_(0),
        ]))
    return rules


def run_chain_pipeline(work: Path, image: Sequence[str]) -> dict:
    diff = work / "change.diff"
    make_diff(diff)
    script = mock.write_script(work / "chain.json", chain_rules(work))
    trace_dir = work / "traces-chain"
    env = _env(script, str(trace_dir))
    q = [_quine_cmd(image, m) for m in CHAIN_MISSIONS]
    out = [shlex.quote(str(work / f"stage{i}.out")) for i in (1, 2, 3)]
    cmd = (f"cat {shlex.quote(str(diff))} | {q[0]} | tee {out[0]} | {q[1]} | tee {out[1]} | "
           f"{q[2]} | tee {out[2]}")
    got = _run_sh(cmd, env)
    handoffs = []
    for i in (1, 2):
        produced = (work / f"stage{i}.out").read_bytes()
        consumed = (work / f"stage{i + 1}.in").read_bytes()
        handoffs.append(produced == consumed and len(produced) > 0)
    sessions = list(iter_sessions(trace_dir))
    missions = sorted(s.header.get("mission", "") for s in sessions)
    return {
        "handoffs_match": all(handoffs),
        "stage1_material_is_input": (work / "stage1.in").read_bytes() == diff.read_bytes(),
        "sessions": len(sessions),
        "distinct_pids": len({s.pid for s in sessions}),
        "missions_ok": missions == sorted(CHAIN_MISSIONS),
        "all_exit_0": all(s.exit_status == 0 for s in sessions),
        "exit_status": got.returncode,
        "stdout": got.stdout.decode(),
    }


PATCH_MISSION = "Apply the patch"
TEST_MISSION = "Run the test suite and report results"


def control_rules(first_status: int) -> list[dict]:
    return [
        mock.rule(_exact(PATCH_MISSION), [
            mock.sh("wc -l <&3"),
            mock.exit_(first_status, None if first_status == 0 else "patch does not apply: conflict"),
        ]),
        mock.rule(_exact(TEST_MISSION), [mock.sh("echo 'tests: 4 passed' >&4"), mock.exit_(0)]),
    ]


def run_control_flow(work: Path, image: Sequence[str], first_status: int) -> dict:
    patch = work / "fix.patch"
    make_diff(patch)
    script = mock.write_script(work / f"control{first_status}.json", control_rules(first_status))
    trace_dir = work / f"traces-control{first_status}"
    env = _env(script, str(trace_dir))
    cmd = (f"{_quine_cmd(image, PATCH_MISSION)} < {shlex.quote(str(patch))} && "
           f"{_quine_cmd(image, TEST_MISSION)}")
    got = _run_sh(cmd, env)
    second_ran = got.stdout == b"tests: 4 passed\n"
    sessions = list(iter_sessions(trace_dir))
    return {
        "first_status": first_status,
        "pipeline_status": got.returncode,
        "second_ran": second_ran,
        "sessions": len(sessions),
        "correct": second_ran == (first_status == 0)
        and got.returncode == first_status
        and len(sessions) == (2 if first_status == 0 else 1),
    }


def run_pipelines_experiment(
    *,
    workdir: str | os.PathLike | None = None,
    self_image: Sequence[str] | None = None,
    lines: int = 1000,
) -> ExperimentReport:
    work = _workdir(workdir, "pipes")
    image = list(self_image or default_self_image())
    rep = ExperimentReport("pipelines", workdir=str(work))
    t0 = time.monotonic()
    filt = run_filter_pipeline(work, image, lines)
    chain = run_chain_pipeline(work, image)
    ok_branch = run_control_flow(work, image, 0)
    bad_branch = run_control_flow(work, image, 3)
    rep.runtime_s = round(time.monotonic() - t0, 3)
    rep.metrics = {
        "filter": {k: v for k, v in filt.items() if k not in ("stdout", "oracle")},
        "chain": {k: v for k, v in chain.items() if k != "stdout"},
        "control": [ok_branch, bad_branch],
    }
    rep.root_stdout = filt["stdout"]
    rep.check("filter_identical_to_oracle", filt["identical"])
    rep.check("chain_handoffs", chain["handoffs_match"] and chain["stage1_material_is_input"])
    rep.check("chain_three_sessions", chain["sessions"] == 3 and chain["distinct_pids"] == 3
              and chain["all_exit_0"] and chain["missions_ok"])
    rep.check("and_runs_after_0", ok_branch["correct"])
    rep.check("and_skipped_after_3", bad_branch["correct"])
    return rep.finish()
