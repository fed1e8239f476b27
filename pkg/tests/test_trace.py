import json

import pytest

from quine.trace import (
    SCHEMA,
    EventKind,
    SessionTrace,
    TraceFinalized,
    read_session,
    reconstruct_tree,
)


def open_trace(d, sid, parent=None, mission="m"):
    return SessionTrace.open(d, session_id=sid, generation=0, mission=mission, argv=[mission],
                             parent_session=parent)


def finish(tr, status=0):
    tr.emit(EventKind.EXIT, 0, status=status)
    tr.close()


def test_start_record(tmp_path):
    tr = open_trace(tmp_path, "s1", mission="M")
    tr.emit(EventKind.START, 0, mission="M", argv=["M"], wisdom_keys=[], material="absent")
    lines = (tmp_path / "s1.qtrace").read_text().splitlines()
    header, start = map(json.loads, lines)
    assert header["schema"] == SCHEMA and header["mission"] == "M" and header["parent_session"] is None
    assert start["kind"] == "Start"
    assert start["payload"]["argv"] == ["M"]
    assert {"ts", "pid", "generation", "turn"} <= set(start)


def test_every_prefix_decodes(tmp_path):
    tr = open_trace(tmp_path, "s1")
    for i in range(5):
        tr.emit(EventKind.GUEST_CALL, i, messages=2 + i)
    finish(tr)
    data = (tmp_path / "s1.qtrace").read_bytes()
    cuts = [i + 1 for i, b in enumerate(data) if b == ord("\n")]
    for cut in cuts:
        (tmp_path / "p.qtrace").write_bytes(data[:cut])
        s = read_session(tmp_path / "p.qtrace")
        assert s.corrupt_lines == 0
        assert len(s.events) == data[:cut].count(b"\n") - 1


def test_no_events_after_exit(tmp_path):
    tr = open_trace(tmp_path, "s1")
    tr.emit(EventKind.EXIT, 0, status=0)
    with pytest.raises(TraceFinalized):
        tr.emit(EventKind.GUEST_CALL, 1)


def test_reopen_after_exec_appends_without_second_header(tmp_path):
    a = open_trace(tmp_path, "s1")
    a.emit(EventKind.EXEC_BOUNDARY, 0)
    a.close()
    b = SessionTrace.open(tmp_path, session_id="s1", generation=1, mission="m", argv=["m"])
    finish(b, 4)
    s = read_session(tmp_path / "s1.qtrace")
    assert [e["kind"] for e in s.events] == ["ExecBoundary", "Exit"]
    assert s.generations == 2 and s.exit_status == 4


def test_unwritable_dir_degrades(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    tr = open_trace(blocker / "sub", "s1")
    tr.emit(EventKind.START, 0)
    assert tr.path is None and len(tr.events) == 1
    assert "trace disabled" in capsys.readouterr().err


def test_corrupt_lines_skipped(tmp_path):
    tr = open_trace(tmp_path, "s1")
    finish(tr)
    with open(tmp_path / "s1.qtrace", "a") as fh:
        fh.write('{"kind": "Start", trunc\n[1]\n{"no_kind": 1}\n')
    s = read_session(tmp_path / "s1.qtrace")
    assert s.corrupt_lines == 3 and s.exit_status == 0


def test_single_session_tree(tmp_path):
    finish(open_trace(tmp_path, "a"))
    tree = reconstruct_tree(tmp_path)
    assert (tree.session_count, tree.depth, tree.levels()) == (1, 1, [1])
    assert not tree.root.synthetic


def test_tree_by_parent_session(tmp_path):
    finish(open_trace(tmp_path, "root"))
    for c in ("c1", "c2"):
        finish(open_trace(tmp_path, c, parent="root"))
    finish(open_trace(tmp_path, "g1", parent="c1"))
    tree = reconstruct_tree(tmp_path)
    assert tree.session_count == 4
    assert tree.depth == 3
    assert tree.levels() == [1, 2, 1]
    assert tree.root.session_id == "root"


def test_tree_by_fork_child_pid(tmp_path):
    parent = open_trace(tmp_path, "p")
    child_file = tmp_path / "c.qtrace"
    child_file.write_text(json.dumps({"schema": SCHEMA, "session_id": "c", "pid": 424242,
                                      "parent_session": None, "mission": "c", "argv": ["c"]}) + "\n")
    parent.emit(EventKind.FORK_CHILD, 0, child_pid=424242)
    finish(parent)
    tree = reconstruct_tree(tmp_path)
    assert tree.levels() == [1, 1]


def test_orphans_hang_off_synthetic_root(tmp_path):
    finish(open_trace(tmp_path, "root"))
    finish(open_trace(tmp_path, "lost", parent="gone"))
    tree = reconstruct_tree(tmp_path)
    assert tree.root.synthetic
    assert tree.orphans == ["lost"]
    assert tree.session_count == 2 and tree.depth == 1
