"""Loop-free patch bytecode standing in for native patch code.

Each instruction is 8 bytes, little-endian: opcode (u8), a (u8), b (u16),
imm (u32). Opcode table:

    0x00 END                       stop
    0x01 IF var cmp imm SKIP k     a=var, b=cmp | k << 8; skip k instrs if true
    0x02 SET_VAR var imm           a=var
    0x03 SET_RESULT imm
    0x04 SET_STATUS status         a=status byte (base | 0x80 overwrite flag)

Skips only go forward, so a program of at most 32 instructions halts in at
most 32 steps. A program ends at END or at the end of the code bytes; anything
after END is ignored (patch images may carry trailing data).
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

INSTR = struct.Struct("<BBHI")
INSTR_SIZE = INSTR.size
MAX_INSTRUCTIONS = 32
U32 = 0xFFFFFFFF


class CorruptProgram(ValueError):
    pass


class Op(enum.IntEnum):
    END = 0x00
    IF = 0x01
    SET_VAR = 0x02
    SET_RESULT = 0x03
    SET_STATUS = 0x04


class Cmp(enum.IntEnum):
    EQ = 0
    NE = 1
    LT = 2
    LE = 3
    GT = 4
    GE = 5


_CMP_FN = {
    Cmp.EQ: lambda x, y: x == y,
    Cmp.NE: lambda x, y: x != y,
    Cmp.LT: lambda x, y: x < y,
    Cmp.LE: lambda x, y: x <= y,
    Cmp.GT: lambda x, y: x > y,
    Cmp.GE: lambda x, y: x >= y,
}


class Base(enum.IntEnum):
    NORMAL = 0
    SKIP = 1
    SKIP_AND_CONTINUE = 2
    SKIP_AND_BREAK = 3


OVERWRITE_RESULT = 0x80


@dataclass(frozen=True)
class DispatchStatus:
    base: Base = Base.NORMAL
    overwrite_result: bool = False

    def to_byte(self) -> int:
        return int(self.base) | (OVERWRITE_RESULT if self.overwrite_result else 0)

    @classmethod
    def from_byte(cls, value: int) -> DispatchStatus:
        if value & ~(OVERWRITE_RESULT | 0x03):
            raise CorruptProgram(f"bad status byte 0x{value:02x}")
        return cls(Base(value & 0x03), bool(value & OVERWRITE_RESULT))

    def __str__(self):
        return self.base.name + ("|OVERWRITE_RESULT" if self.overwrite_result else "")


NORMAL = DispatchStatus()


@dataclass(frozen=True)
class Instr:
    op: Op
    a: int = 0
    b: int = 0
    imm: int = 0


def decode(code: bytes, n_vars: int) -> list[Instr]:
    """Decode and validate; raises CorruptProgram."""
    prog: list[Instr] = []
    pos = 0
    while pos < len(code):
        if pos + INSTR_SIZE > len(code):
            raise CorruptProgram("truncated instruction")
        opcode, a, b, imm = INSTR.unpack_from(code, pos)
        pos += INSTR_SIZE
        try:
            op = Op(opcode)
        except ValueError:
            raise CorruptProgram(f"unknown opcode 0x{opcode:02x}") from None
        if op is Op.END:
            break
        if len(prog) == MAX_INSTRUCTIONS:
            raise CorruptProgram(f"more than {MAX_INSTRUCTIONS} instructions")
        if op in (Op.IF, Op.SET_VAR) and a >= n_vars:
            raise CorruptProgram(f"variable index {a} out of range")
        if op is Op.IF:
            if b & 0xFF not in Cmp._value2member_map_:
                raise CorruptProgram(f"bad comparison {b & 0xFF}")
        if op is Op.SET_STATUS:
            DispatchStatus.from_byte(a)
        prog.append(Instr(op, a, b, imm))
    for pc, ins in enumerate(prog):
        if ins.op is Op.IF and pc + 1 + (ins.b >> 8) > len(prog):
            raise CorruptProgram(f"skip at {pc} jumps past the end")
    return prog


def encode(prog: list[Instr], terminate: bool = True) -> bytes:
    out = b"".join(INSTR.pack(i.op, i.a, i.b, i.imm) for i in prog)
    return out + (INSTR.pack(Op.END, 0, 0, 0) if terminate else b"")


@dataclass
class ExecResult:
    status: DispatchStatus
    result: int
    steps: int


def execute(prog: list[Instr], shared_vars: list[int]) -> ExecResult:
    """Run a decoded program against shared_vars (mutated in place)."""
    status = NORMAL
    result = 0
    pc = 0
    steps = 0
    while pc < len(prog):
        ins = prog[pc]
        steps += 1
        pc += 1
        if ins.op is Op.IF:
            if _CMP_FN[Cmp(ins.b & 0xFF)](shared_vars[ins.a], ins.imm):
                pc += ins.b >> 8
        elif ins.op is Op.SET_VAR:
            shared_vars[ins.a] = ins.imm
        elif ins.op is Op.SET_RESULT:
            result = ins.imm
        elif ins.op is Op.SET_STATUS:
            status = DispatchStatus.from_byte(ins.a)
    return ExecResult(status, result, steps)


def run(code: bytes, shared_vars: list[int]) -> ExecResult:
    return execute(decode(code, len(shared_vars)), shared_vars)


# -- text form ------------------------------------------------------------

def _int(tok: str) -> int:
    value = int(tok, 0)
    if not 0 <= value <= U32:
        raise ValueError(f"{tok} does not fit in 32 bits")
    return value


def _status(tok: str) -> int:
    base = Base.NORMAL
    overwrite = False
    for part in tok.split("|"):
        part = part.strip().upper()
        if part == "OVERWRITE_RESULT":
            overwrite = True
        elif part in Base.__members__:
            base = Base[part]
        else:
            raise ValueError(f"unknown status {part!r}")
    return DispatchStatus(base, overwrite).to_byte()


def assemble(text: str, var_names: list[str], terminate: bool = True) -> bytes:
    """Assemble mnemonic text into bytecode.

    One instruction per line; '#' starts a comment. A trailing END is added if
    the text does not end with one, unless terminate is False (the program then
    ends at the end of its bytes).
    """
    index = {name: i for i, name in enumerate(var_names)}
    prog: list[Instr] = []
    ended = False

    def var(tok: str, lineno: int) -> int:
        if tok not in index:
            raise ValueError(f"line {lineno}: unknown variable {tok!r}")
        return index[tok]

    for lineno, line in enumerate(text.splitlines(), 1):
        toks = line.split("#", 1)[0].split()
        if not toks:
            continue
        mnem = toks[0].upper()
        if ended:
            raise ValueError(f"line {lineno}: instruction after END")
        try:
            if mnem == "END" and len(toks) == 1:
                prog.append(Instr(Op.END))
            elif mnem == "IF" and len(toks) == 6 and toks[4].upper() == "SKIP":
                k = int(toks[5], 0)
                if not 0 <= k <= 0xFF:
                    raise ValueError("skip count must be 0..255")
                prog.append(Instr(Op.IF, var(toks[1], lineno), Cmp[toks[2].upper()] | k << 8, _int(toks[3])))
            elif mnem == "SET_VAR" and len(toks) == 3:
                prog.append(Instr(Op.SET_VAR, var(toks[1], lineno), 0, _int(toks[2])))
            elif mnem == "SET_RESULT" and len(toks) == 2:
                prog.append(Instr(Op.SET_RESULT, 0, 0, _int(toks[1])))
            elif mnem == "SET_STATUS" and len(toks) == 2:
                prog.append(Instr(Op.SET_STATUS, _status(toks[1])))
            else:
                raise ValueError(f"cannot parse {line.strip()!r}")
        except KeyError as exc:
            raise ValueError(f"line {lineno}: unknown comparison {exc}") from None
        except ValueError as exc:
            msg = str(exc)
            raise ValueError(msg if msg.startswith("line ") else f"line {lineno}: {msg}") from None
        ended = prog[-1].op is Op.END
    code = encode(prog, terminate=terminate and not ended)
    decode(code, len(var_names))
    return code


def disassemble(code: bytes, var_names: list[str]) -> str:
    lines = []
    for ins in decode(code, len(var_names)):
        if ins.op is Op.IF:
            lines.append(f"IF {var_names[ins.a]} {Cmp(ins.b & 0xFF).name} 0x{ins.imm:x} SKIP {ins.b >> 8}")
        elif ins.op is Op.SET_VAR:
            lines.append(f"SET_VAR {var_names[ins.a]} 0x{ins.imm:x}")
        elif ins.op is Op.SET_RESULT:
            lines.append(f"SET_RESULT 0x{ins.imm:x}")
        else:
            lines.append(f"SET_STATUS {DispatchStatus.from_byte(ins.a)}")
    lines.append("END")
    return "\n".join(lines) + "\n"
