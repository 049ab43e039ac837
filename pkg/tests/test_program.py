import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hotpatch_sim import program
from hotpatch_sim.program import (
    INSTR, MAX_INSTRUCTIONS, NORMAL, Base, Cmp, CorruptProgram, DispatchStatus, Instr, Op,
)

VARS = ["len", "cap", "flag"]


def test_assemble_encoding():
    code = program.assemble("IF len GT 64 SKIP 1\nSET_RESULT 7\n", VARS)
    assert code == (INSTR.pack(1, 0, Cmp.GT | 1 << 8, 64) + INSTR.pack(3, 0, 0, 7)
                    + INSTR.pack(0, 0, 0, 0))


def test_unterminated_assembly():
    code = program.assemble("SET_RESULT 1\nSET_STATUS SKIP", VARS, terminate=False)
    assert len(code) == 16
    assert program.run(code, [0, 0, 0]).status == DispatchStatus(Base.SKIP)


def test_status_byte_round_trip():
    for base in Base:
        for ow in (False, True):
            s = DispatchStatus(base, ow)
            assert DispatchStatus.from_byte(s.to_byte()) == s
    assert DispatchStatus(Base.SKIP, True).to_byte() == 0x81
    with pytest.raises(CorruptProgram):
        DispatchStatus.from_byte(0x04)


def test_input_guard():
    code = program.assemble(
        "IF len LE 64 SKIP 2\nSET_RESULT 22\nSET_STATUS SKIP|OVERWRITE_RESULT\n", VARS)
    ok = program.run(code, [10, 0, 0])
    assert ok.status == NORMAL
    bad = program.run(code, [65, 0, 0])
    assert bad.status == DispatchStatus(Base.SKIP, True) and bad.result == 22


def test_set_var_writes_shared_region():
    shared = [0, 0, 0]
    program.run(program.assemble("SET_VAR flag 9", VARS), shared)
    assert shared == [0, 0, 9]


def test_trailing_bytes_after_end_ignored():
    code = program.assemble("SET_RESULT 5", VARS) + b"\xab" * 24
    assert program.run(code, [0, 0, 0]).result == 5


@pytest.mark.parametrize("code,msg", [
    (INSTR.pack(9, 0, 0, 0), "opcode"),
    (INSTR.pack(Op.IF, 7, 0, 0), "variable"),
    (INSTR.pack(Op.IF, 0, 9, 0), "comparison"),
    (INSTR.pack(Op.IF, 0, 5 << 8, 0), "jumps past"),
    (INSTR.pack(Op.SET_STATUS, 0x40, 0, 0), "status"),
    (b"\x03\x00\x00", "truncated"),
    (INSTR.pack(Op.SET_RESULT, 0, 0, 1) * (MAX_INSTRUCTIONS + 1), "more than"),
])
def test_corrupt_programs(code, msg):
    with pytest.raises(CorruptProgram, match=msg):
        program.decode(code, len(VARS))


@pytest.mark.parametrize("text", [
    "FOO 1", "IF nope GT 1 SKIP 0", "SET_RESULT 0x100000000", "SET_STATUS WAT",
    "IF len GT 1", "END\nSET_RESULT 1",
])
def test_assembler_errors(text):
    with pytest.raises(ValueError):
        program.assemble(text, VARS)


def test_disassemble_round_trip():
    text = "IF cap GE 3 SKIP 1\nSET_VAR len 4\nSET_RESULT 4294967274\nSET_STATUS SKIP_AND_BREAK\n"
    code = program.assemble(text, VARS)
    assert program.assemble(program.disassemble(code, VARS), VARS) == code


instr = st.one_of(
    st.builds(lambda a, c, k, imm: Instr(Op.IF, a, c | k << 8, imm),
              st.integers(0, 2), st.integers(0, 5), st.integers(0, 40), st.integers(0, 2**32 - 1)),
    st.builds(lambda a, imm: Instr(Op.SET_VAR, a, 0, imm), st.integers(0, 2), st.integers(0, 2**32 - 1)),
    st.builds(lambda imm: Instr(Op.SET_RESULT, 0, 0, imm), st.integers(0, 2**32 - 1)),
    st.builds(lambda s: Instr(Op.SET_STATUS, s), st.sampled_from([0, 1, 2, 3, 0x80, 0x81, 0x82, 0x83])),
)


@settings(max_examples=300, deadline=None)
@given(st.lists(instr, max_size=MAX_INSTRUCTIONS),
       st.lists(st.integers(0, 2**32 - 1), min_size=3, max_size=3))
def test_any_valid_program_halts_within_its_length(prog, shared):
    code = program.encode(prog)
    try:
        decoded = program.decode(code, 3)
    except CorruptProgram:
        return  # forward skip past the end
    res = program.execute(decoded, shared)
    assert res.steps <= len(decoded) <= MAX_INSTRUCTIONS
    assert 0 <= res.result <= 2**32 - 1
