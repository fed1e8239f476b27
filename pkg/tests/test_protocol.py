import json

import pytest
from hypothesis import given, strategies as st

from quine.protocol import (
    ExecCall,
    ExitCall,
    ForkCall,
    MalformedToolArguments,
    MaterialStatus,
    Message,
    Mission,
    RawToolCall,
    Role,
    ShCall,
    StateTier,
    WisdomError,
    WisdomMap,
    assemble_context,
    decode_tool_call,
    parse_guest_response,
    render_system,
)
from quine.guest import GuestResponse


def raw(name, args, id="c1"):
    return RawToolCall(id, name, args if isinstance(args, str) else json.dumps(args))


# -- assemble_context ---------------------------------------------------------


def test_minimal_context_announces_fd3():
    msgs = assemble_context(Mission("M"), WisdomMap(), [], MaterialStatus.AVAILABLE)
    assert [m.role for m in msgs] == [Role.SYSTEM, Role.USER]
    assert "M" in msgs[0].content
    assert "fd 3" in msgs[1].content
    assert "stdin" in msgs[1].content


def test_wisdom_rendered_after_exec():
    w = WisdomMap.of({"found_count": "4", "current_position": "~100K tokens"}, generation=1)
    system = assemble_context(Mission("M"), w, [], MaterialStatus.AVAILABLE)[0].content
    assert 'found_count = "4"' in system
    assert 'current_position = "~100K tokens"' in system
    assert "GENERATION: 1" in system


def test_wisdom_hidden_at_generation_zero():
    w = WisdomMap.of({"inherited": "from-parent"}, generation=0)
    system = assemble_context(Mission("M"), w, [], MaterialStatus.AVAILABLE)[0].content
    assert "from-parent" not in system
    assert "GENERATION: 0" in system


def test_absent_material():
    user = assemble_context(Mission("M"), WisdomMap(), [], MaterialStatus.ABSENT)[1].content
    assert "No material is attached" in user


def test_exhausted_material():
    user = assemble_context(Mission("M"), WisdomMap(), [], MaterialStatus.EXHAUSTED)[1].content
    assert "end of file" in user


def test_history_appended_unmodified():
    hist = [
        Message(Role.ASSISTANT, "", tool_calls=(raw("sh", {"command": "ls"}),)),
        Message(Role.TOOL_RESULT, "exit_status: 0", tool_call_id="c1"),
        Message(Role.ASSISTANT, "thinking"),
    ]
    msgs = assemble_context(Mission("M"), WisdomMap(), hist, MaterialStatus.AVAILABLE)
    assert msgs[2:] == hist


def test_advisory_goes_to_user_message_only():
    a = assemble_context(Mission("M"), WisdomMap(), [], MaterialStatus.AVAILABLE, "renew soon")
    b = assemble_context(Mission("M"), WisdomMap(), [], MaterialStatus.AVAILABLE)
    assert a[0] == b[0]
    assert "renew soon" in a[1].content


def test_mission_must_be_nonempty():
    with pytest.raises(ValueError):
        Mission("   ")
    assert Mission.from_words(["Summarize", "the", "log"]).text == "Summarize the log"


def test_message_tool_call_id_iff_tool_result():
    with pytest.raises(ValueError):
        Message(Role.TOOL_RESULT, "x")
    with pytest.raises(ValueError):
        Message(Role.USER, "x", tool_call_id="a")


missions = st.text(min_size=1).filter(lambda s: s.strip())
texts = st.text()


@given(missions, st.lists(texts, min_size=2, max_size=4))
def test_system_message_independent_of_material_status_and_history(mission, contents):
    m = Mission(mission)
    hist = [Message(Role.ASSISTANT, c) for c in contents]
    systems = {
        assemble_context(m, WisdomMap(), h, s)[0]
        for s in MaterialStatus
        for h in ([], hist)
    }
    assert len(systems) == 1


@given(st.lists(texts, max_size=6))
def test_history_order_preserved(contents):
    hist = [Message(Role.ASSISTANT, c) for c in contents]
    msgs = assemble_context(Mission("M"), WisdomMap(), hist, MaterialStatus.AVAILABLE)
    assert [m.content for m in msgs[2:]] == contents
    assert sum(m.role is Role.SYSTEM for m in msgs) == 1 and msgs[0].role is Role.SYSTEM


# -- WisdomMap ------------------------------------------------------------------

keys = st.from_regex(r"[A-Za-z_][A-Za-z0-9_]{0,12}", fullmatch=True)
values = st.text(alphabet=st.characters(blacklist_categories=("Cs",), blacklist_characters="\x00"))


@given(st.dictionaries(keys, values, max_size=8), st.integers(0, 1000))
def test_wisdom_env_roundtrip(entries, generation):
    w = WisdomMap.of(entries, generation)
    env = w.encode({"PATH": "/bin", "QUINE_WISDOM_stale": "old"})
    assert WisdomMap.decode(env) == w
    assert env["PATH"] == "/bin"
    assert env["QUINE_GENERATION"] == str(generation)


def test_wisdom_encoding_names():
    env = WisdomMap.of({"a": "1"}, 3).encode({})
    assert env == {"QUINE_GENERATION": "3", "QUINE_WISDOM_a": "1"}


def test_wisdom_renew_increments_generation():
    w = WisdomMap.of({"a": "1"}, 4).renewed({"b": "2"})
    assert w.generation == 5 and w.as_dict() == {"b": "2"}


@pytest.mark.parametrize("key", ["9bad", "", "a-b", "with space", "é"])
def test_bad_wisdom_keys(key):
    with pytest.raises(WisdomError):
        WisdomMap.of({key: "v"})


def test_nul_value_rejected():
    with pytest.raises(WisdomError):
        ExecCall.of({"a": "x\x00y"})


def test_state_tiers():
    assert not StateTier.EPHEMERAL.survives_exec
    assert StateTier.SCOPED.survives_exec and not StateTier.SCOPED.survives_exit
    assert StateTier.GLOBAL.survives_exit


# -- tool call decoding -----------------------------------------------------------


def test_parse_sh():
    calls = parse_guest_response(GuestResponse(tool_calls=(raw("sh", {"command": "ls"}),)))
    assert len(calls) == 1 and calls[0].ok
    assert calls[0].action == ShCall("ls")


def test_unknown_tool_rejected():
    (call,) = parse_guest_response(GuestResponse(tool_calls=(raw("fly", {}),)))
    assert not call.ok
    assert isinstance(call.error, MalformedToolArguments)
    assert "unknown tool" in str(call.error)


def test_exit_status_out_of_range():
    (call,) = parse_guest_response(GuestResponse(tool_calls=(raw("exit", {"status": 300}),)))
    assert not call.ok and "0-255" in str(call.error)


def test_zero_calls_is_empty_list():
    assert parse_guest_response(GuestResponse(assistant_text="hmm")) == []


def test_provider_order_kept():
    resp = GuestResponse(tool_calls=(
        raw("sh", {"command": "a"}, "x"),
        raw("fly", {}, "y"),
        raw("exit", {"status": 0}, "z"),
    ))
    calls = parse_guest_response(resp)
    assert [c.id for c in calls] == ["x", "y", "z"]
    assert [c.ok for c in calls] == [True, False, True]


@pytest.mark.parametrize("name,args,needle", [
    ("sh", {"command": ""}, "non-empty"),
    ("sh", {"command": "ls", "cwd": "/"}, "unknown field"),
    ("sh", {"command": "ls", "timeout_s": 0}, "timeout_s"),
    ("sh", {"command": "ls", "timeout_s": True}, "timeout_s"),
    ("sh", {}, "missing"),
    ("fork", {"children": []}, "non-empty"),
    ("fork", {"children": [{"argv": "x", "env": {}}]}, "unknown field"),
    ("fork", {"children": [{"argv": "  "}]}, "argv"),
    ("fork", {"children": [{"argv": "x"}], "wait": "yes"}, "wait"),
    ("fork", {"children": [{"argv": "x"}] * 17}, "at most 16"),
    ("exec", {"wisdom": {"9bad": "v"}}, "invalid wisdom key"),
    ("exec", {"wisdom": {"a": 1}}, "string"),
    ("exec", {}, "missing"),
    ("exit", {"status": -1}, "0-255"),
    ("exit", {"status": 256}, "0-255"),
    ("exit", {"status": "0"}, "0-255"),
    ("exit", {"status": 0, "code": 1}, "unknown field"),
    ("sh", "{not json", "valid JSON"),
    ("sh", "[1, 2]", "JSON object"),
])
def test_malformed_arguments(name, args, needle):
    call = decode_tool_call(raw(name, args))
    assert not call.ok
    assert needle in str(call.error)


def test_well_formed_variants():
    assert decode_tool_call(raw("fork", {"children": [{"argv": "a", "stdin": "x"}], "wait": False})).action == \
        ForkCall((__import__("quine.protocol").protocol.ChildSpec("a", "x"),), False)
    assert decode_tool_call(raw("exec", {"wisdom": {"k": "v"}})).action == ExecCall.of({"k": "v"})
    assert decode_tool_call(raw("exit", {"status": 3, "message": "conflict"})).action == ExitCall(3, "conflict")
    assert decode_tool_call(raw("sh", "")).error is not None  # empty args: command missing


def test_system_template_mentions_all_tools():
    text = render_system(Mission("do it"), WisdomMap())
    for tool in ("sh(", "fork(", "exec(", "exit("):
        assert tool in text
