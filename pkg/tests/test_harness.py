import json
import re
import subprocess
import sys

import pytest

from quine.harness import (
    LibrarySpec,
    StreamSpec,
    generate_library,
    run_fractal_experiment,
    run_streaming_experiment,
    stream_segments,
)
from quine.harness.experiments import streaming_plan
from quine.harness.library import UUID_LINE_RE, needle_location

from conftest import clean_env


def test_library_layout(tmp_path):
    m = generate_library(LibrarySpec(2, 3, 4, seed=1), tmp_path / "lib")
    assert len(m.paths) == 24
    assert m.paths[0].endswith("hex_00/shelf_00/volume_00000.txt")
    uuid = re.compile(UUID_LINE_RE)
    odd = [p for p in m.paths if not all(uuid.match(l) for l in open(p).read().splitlines())]
    assert odd == [m.needle_path]
    assert json.load(open(tmp_path / "lib" / "MANIFEST.json"))["file_count"] == 24


def test_library_deterministic(tmp_path):
    a = generate_library(LibrarySpec(2, 2, 2, seed=5), tmp_path / "a")
    b = generate_library(LibrarySpec(2, 2, 2, seed=5), tmp_path / "b")
    for pa, pb in zip(a.paths, b.paths):
        assert open(pa).read() == open(pb).read()
    assert needle_location(LibrarySpec(2, 2, 2, seed=5)) == needle_location(LibrarySpec(2, 2, 2, seed=5))


def test_library_grep_oracle(tmp_path):
    # The same grep the searchers run, executed directly, finds exactly the needle.
    m = generate_library(LibrarySpec(3, 2, 2, seed=3), tmp_path / "lib")
    p = subprocess.run(["grep", "-rlvE", UUID_LINE_RE, *m.hex_dirs()], capture_output=True, text=True)
    assert p.stdout.splitlines() == [m.needle_path]


def test_library_spec_validation():
    with pytest.raises(ValueError):
        LibrarySpec(0, 1, 1)


def test_stream_segments():
    segs = stream_segments(StreamSpec(5, 2, tokens_per_segment=8, seed=1))
    assert len(segs) == 5
    assert all(len(s.split()) == 8 for s in segs)
    assert [("needle" in s) for s in segs] == [False, False, True, False, False]
    with pytest.raises(ValueError):
        StreamSpec(3, 3)


@pytest.mark.parametrize("segments,every,needle,gens", [(3, 3, 1, 1), (9, 1, 8, 9), (12, 4, 11, 3)])
def test_streaming_plan_generation_counts(segments, every, needle, gens):
    plan, expect = streaming_plan(StreamSpec(segments, needle), every)
    assert expect == gens == len(plan)


def test_fractal_small(tmp_path):
    rep = run_fractal_experiment(LibrarySpec(4, 2, 2, seed=2), fanout=2, workdir=tmp_path)
    assert rep.ok, rep.checks
    assert rep.metrics["session_count"] == 3 and rep.metrics["tree_depth"] == 2


def test_fractal_flat_fanout_ten(tmp_path):
    rep = run_fractal_experiment(LibrarySpec(10, 2, 2, seed=4), fanout=10, workdir=tmp_path)
    assert rep.ok, rep.checks
    assert rep.metrics["levels"] == [1, 10]


@pytest.mark.parametrize("material", ["pipe", "file"])
def test_streaming_single_generation(tmp_path, material):
    rep = run_streaming_experiment(StreamSpec(3, 1), 3, workdir=tmp_path, material=material)
    assert rep.ok, rep.checks
    assert rep.metrics["generations_used"] == 1


def test_streaming_renewal(tmp_path):
    rep = run_streaming_experiment(StreamSpec(12, 11), 4, workdir=tmp_path)
    assert rep.ok, rep.checks
    assert rep.metrics["exec_cycles"] == 2


def test_harness_cli_with_figures(tmp_path):
    pytest.importorskip("matplotlib")
    out = tmp_path / "out"
    p = subprocess.run(
        [sys.executable, "-m", "quine.harness.cli", "fractal", "--hexes", "3", "--shelves", "2",
         "--volumes", "2", "--fanout", "3", "--recurse", "1", "--out", str(out), "--figures"],
        capture_output=True, text=True, env=clean_env(), timeout=120,
    )
    assert p.returncode == 0, p.stderr
    report = json.loads((out / "report.json").read_text())
    assert report["ok"]
    assert (out / "tree.png").stat().st_size > 0
