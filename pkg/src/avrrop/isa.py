"""AVR8 instruction subset: decoding, text assembly and linear disassembly.

Only the opcodes needed by the gadget scanner, the chain synthesizer and the
emulator are covered. Every other 16-bit word decodes to ``Op.UNKNOWN`` so
that callers can skip data embedded in flash instead of aborting.

Program addresses are word addresses throughout.
"""

from __future__ import annotations

import enum
import functools
import re
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Sequence

from .errors import (
    MissingTrailingWord,
    OperandOutOfRange,
    RangeOutOfBounds,
    UnsupportedMnemonic,
)

if TYPE_CHECKING:
    from .firmware import FirmwareImage


class Op(enum.Enum):
    NOP = "nop"
    POP = "pop"
    PUSH = "push"
    RET = "ret"
    RETI = "reti"
    MOVW = "movw"
    MOV = "mov"
    LDI = "ldi"
    IN = "in"
    OUT = "out"
    ST = "st"  # st Z, r
    ST_ZP = "st+"  # st Z+, r
    STD = "std"  # std Z+q, r
    LD = "ld"  # ld r, Z
    LD_ZP = "ld+"  # ld r, Z+
    LDD = "ldd"  # ldd r, Z+q
    STS = "sts"
    LDS = "lds"
    SPM = "spm"
    LPM = "lpm"  # implied r0, Z
    LPM_Z = "lpm.z"
    LPM_ZP = "lpm.z+"
    CLI = "cli"
    SEI = "sei"
    SBI = "sbi"
    CBI = "cbi"
    CALL = "call"
    RCALL = "rcall"
    ICALL = "icall"
    JMP = "jmp"
    RJMP = "rjmp"
    IJMP = "ijmp"
    CPI = "cpi"
    BRNE = "brne"
    BREQ = "breq"
    ADD = "add"
    ADIW = "adiw"
    SBIW = "sbiw"
    SUBI = "subi"
    SBCI = "sbci"
    EOR = "eor"
    UNKNOWN = ".word"

    @property
    def mnemonic(self) -> str:
        if self is Op.UNKNOWN:
            return ".word"
        return self.value.split(".")[0].rstrip("+")


TWO_WORD_OPS = frozenset({Op.JMP, Op.CALL, Op.LDS, Op.STS})
TERMINATORS = frozenset({Op.RET, Op.RETI})
CONTROL_FLOW = frozenset(
    {Op.RET, Op.RETI, Op.CALL, Op.RCALL, Op.ICALL, Op.JMP, Op.RJMP, Op.IJMP, Op.BRNE, Op.BREQ}
)


@dataclass(frozen=True)
class Instruction:
    op: Op
    operands: tuple[int, ...] = ()

    @property
    def width(self) -> int:
        return 2 if self.op in TWO_WORD_OPS else 1

    @property
    def mnemonic(self) -> str:
        return self.op.mnemonic

    @property
    def is_unknown(self) -> bool:
        return self.op is Op.UNKNOWN

    def text(self) -> str:
        return format_instruction(self)

    def __str__(self) -> str:
        return self.text()


# ---------------------------------------------------------------------------
# decoding


def _rd5(w: int) -> int:
    return (w >> 4) & 0x1F


def _rr5(w: int) -> int:
    return ((w >> 5) & 0x10) | (w & 0x0F)


def _k8(w: int) -> int:
    return ((w >> 4) & 0xF0) | (w & 0x0F)


def _signed(value: int, bits: int) -> int:
    if value & (1 << (bits - 1)):
        return value - (1 << bits)
    return value


@functools.lru_cache(maxsize=1 << 16)
def _decode_cached(low: int, trailing: int | None) -> Instruction:
    w = low
    if w == 0x0000:
        return Instruction(Op.NOP)
    fixed = _FIXED_WORDS.get(w)
    if fixed is not None:
        return Instruction(fixed)

    top4 = w >> 12
    if top4 == 0x0:
        if (w & 0xFF00) == 0x0100:
            return Instruction(Op.MOVW, (((w >> 4) & 0xF) * 2, (w & 0xF) * 2))
        if (w & 0xFC00) == 0x0C00:
            return Instruction(Op.ADD, (_rd5(w), _rr5(w)))
        return Instruction(Op.UNKNOWN, (w,))
    if top4 == 0x2:
        if (w & 0xFC00) == 0x2C00:
            return Instruction(Op.MOV, (_rd5(w), _rr5(w)))
        if (w & 0xFC00) == 0x2400:
            return Instruction(Op.EOR, (_rd5(w), _rr5(w)))
        return Instruction(Op.UNKNOWN, (w,))
    if top4 in (0x3, 0x4, 0x5, 0xE):
        op = {0x3: Op.CPI, 0x4: Op.SBCI, 0x5: Op.SUBI, 0xE: Op.LDI}[top4]
        return Instruction(op, (16 + ((w >> 4) & 0xF), _k8(w)))
    if (w & 0xD000) == 0x8000:
        # ld/st with displacement; bit 3 selects Y (unsupported) or Z
        if w & 0x0008:
            return Instruction(Op.UNKNOWN, (w,))
        q = ((w >> 8) & 0x20) | ((w >> 7) & 0x18) | (w & 0x7)
        reg = _rd5(w)
        if w & 0x0200:
            return Instruction(Op.STD, (q, reg)) if q else Instruction(Op.ST, (reg,))
        return Instruction(Op.LDD, (reg, q)) if q else Instruction(Op.LD, (reg,))
    if (w & 0xFC00) == 0x9000:
        low4 = w & 0xF
        reg = _rd5(w)
        store = bool(w & 0x0200)
        if low4 == 0x0:
            if trailing is None:
                raise MissingTrailingWord(f"{'sts' if store else 'lds'} at end of image")
            if store:
                return Instruction(Op.STS, (trailing, reg))
            return Instruction(Op.LDS, (reg, trailing))
        if low4 == 0x1:
            return Instruction(Op.ST_ZP, (reg,)) if store else Instruction(Op.LD_ZP, (reg,))
        if low4 == 0xF:
            return Instruction(Op.PUSH, (reg,)) if store else Instruction(Op.POP, (reg,))
        if not store and low4 == 0x4:
            return Instruction(Op.LPM_Z, (reg,))
        if not store and low4 == 0x5:
            return Instruction(Op.LPM_ZP, (reg,))
        return Instruction(Op.UNKNOWN, (w,))
    if (w & 0xFE0C) == 0x940C:
        if trailing is None:
            raise MissingTrailingWord(f"{'call' if w & 2 else 'jmp'} at end of image")
        k = (((w >> 3) & 0x3E) | (w & 1)) << 16 | trailing
        return Instruction(Op.CALL if w & 0x2 else Op.JMP, (k,))
    if (w & 0xFE00) == 0x9600:
        op = Op.SBIW if w & 0x0100 else Op.ADIW
        return Instruction(op, (24 + ((w >> 4) & 0x3) * 2, ((w >> 2) & 0x30) | (w & 0xF)))
    if (w & 0xFD00) == 0x9800:
        return Instruction(Op.SBI if w & 0x0200 else Op.CBI, ((w >> 3) & 0x1F, w & 0x7))
    if top4 == 0xB:
        a = ((w >> 5) & 0x30) | (w & 0xF)
        if w & 0x0800:
            return Instruction(Op.OUT, (a, _rd5(w)))
        return Instruction(Op.IN, (_rd5(w), a))
    if top4 in (0xC, 0xD):
        return Instruction(Op.RJMP if top4 == 0xC else Op.RCALL, (_signed(w & 0xFFF, 12),))
    if (w & 0xFC07) == 0xF001:
        return Instruction(Op.BREQ, (_signed((w >> 3) & 0x7F, 7),))
    if (w & 0xFC07) == 0xF401:
        return Instruction(Op.BRNE, (_signed((w >> 3) & 0x7F, 7),))
    return Instruction(Op.UNKNOWN, (w,))


_FIXED_WORDS = {
    0x9508: Op.RET,
    0x9518: Op.RETI,
    0x9509: Op.ICALL,
    0x9409: Op.IJMP,
    0x95E8: Op.SPM,
    0x95C8: Op.LPM,
    0x94F8: Op.CLI,
    0x9478: Op.SEI,
}


def needs_trailing_word(low_word: int) -> bool:
    """True when ``low_word`` starts a two-word encoding."""
    return (low_word & 0xFC0F) == 0x9000 or (low_word & 0xFE0C) == 0x940C


def decode_instruction(low_word: int, trailing_word: int | None = None) -> Instruction:
    """Decode one instruction; unsupported encodings become ``Op.UNKNOWN``.

    Raises MissingTrailingWord when a two-word opcode has no second word.
    """
    if not 0 <= low_word <= 0xFFFF:
        raise OperandOutOfRange(f"word {low_word:#x} is not 16-bit")
    if not needs_trailing_word(low_word):
        trailing_word = None
    return _decode_cached(low_word, trailing_word)


# ---------------------------------------------------------------------------
# encoding


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise OperandOutOfRange(msg)


def _reg(r: int) -> int:
    _check(0 <= r <= 31, f"register r{r} out of range")
    return r


def _d5(d: int) -> int:
    return (_reg(d) & 0x1F) << 4


def _r5(r: int) -> int:
    r = _reg(r)
    return ((r & 0x10) << 5) | (r & 0xF)


def _hi_imm(op: Op, d: int, k: int, base: int) -> int:
    _check(16 <= d <= 31, f"{op.mnemonic} needs r16..r31, got r{d}")
    _check(0 <= k <= 0xFF, f"immediate {k} out of range")
    return base | ((k & 0xF0) << 4) | ((d - 16) << 4) | (k & 0xF)


def encode(insn: Instruction) -> list[int]:
    """Encode a single instruction to its 16-bit words."""
    op, a = insn.op, insn.operands
    for fixed_word, fixed_op in _FIXED_WORDS.items():
        if fixed_op is op:
            return [fixed_word]
    if op is Op.NOP:
        return [0x0000]
    if op is Op.UNKNOWN:
        return [a[0] & 0xFFFF]
    if op is Op.MOVW:
        d, r = a
        _check(d % 2 == 0 and r % 2 == 0, "movw needs even registers")
        return [0x0100 | ((_reg(d) // 2) << 4) | (_reg(r) // 2)]
    if op in (Op.ADD, Op.MOV, Op.EOR):
        base = {Op.ADD: 0x0C00, Op.MOV: 0x2C00, Op.EOR: 0x2400}[op]
        return [base | _d5(a[0]) | _r5(a[1])]
    if op in (Op.CPI, Op.SBCI, Op.SUBI, Op.LDI):
        base = {Op.CPI: 0x3000, Op.SBCI: 0x4000, Op.SUBI: 0x5000, Op.LDI: 0xE000}[op]
        return [_hi_imm(op, a[0], a[1], base)]
    if op in (Op.ST, Op.LD):
        return [(0x8200 if op is Op.ST else 0x8000) | _d5(a[0])]
    if op in (Op.STD, Op.LDD):
        q, reg = (a[0], a[1]) if op is Op.STD else (a[1], a[0])
        _check(1 <= q <= 63, f"displacement {q} out of range")
        base = 0x8200 if op is Op.STD else 0x8000
        return [base | ((q & 0x20) << 8) | ((q & 0x18) << 7) | (q & 0x7) | _d5(reg)]
    if op in (Op.ST_ZP, Op.LD_ZP):
        return [(0x9201 if op is Op.ST_ZP else 0x9001) | _d5(a[0])]
    if op in (Op.PUSH, Op.POP):
        return [(0x920F if op is Op.PUSH else 0x900F) | _d5(a[0])]
    if op in (Op.LPM_Z, Op.LPM_ZP):
        return [(0x9004 if op is Op.LPM_Z else 0x9005) | _d5(a[0])]
    if op in (Op.STS, Op.LDS):
        k, reg = (a[0], a[1]) if op is Op.STS else (a[1], a[0])
        _check(0 <= k <= 0xFFFF, f"data address {k:#x} out of range")
        return [(0x9200 if op is Op.STS else 0x9000) | _d5(reg), k]
    if op in (Op.JMP, Op.CALL):
        k = a[0]
        _check(0 <= k <= 0x3FFFFF, f"program address {k:#x} out of range")
        hi = k >> 16
        word = 0x940C | (0x2 if op is Op.CALL else 0) | ((hi & 0x3E) << 3) | (hi & 1)
        return [word, k & 0xFFFF]
    if op in (Op.ADIW, Op.SBIW):
        d, k = a
        _check(d in (24, 26, 28, 30), f"{op.mnemonic} needs r24/r26/r28/r30, got r{d}")
        _check(0 <= k <= 63, f"immediate {k} out of range")
        base = 0x9700 if op is Op.SBIW else 0x9600
        return [base | ((k & 0x30) << 2) | (((d - 24) // 2) << 4) | (k & 0xF)]
    if op in (Op.SBI, Op.CBI):
        io, bit = a
        _check(0 <= io <= 31, f"io address {io:#x} out of range for {op.mnemonic}")
        _check(0 <= bit <= 7, f"bit {bit} out of range")
        return [(0x9A00 if op is Op.SBI else 0x9800) | (io << 3) | bit]
    if op in (Op.IN, Op.OUT):
        reg, io = (a[0], a[1]) if op is Op.IN else (a[1], a[0])
        _check(0 <= io <= 63, f"io address {io:#x} out of range")
        base = 0xB800 if op is Op.OUT else 0xB000
        return [base | ((io & 0x30) << 5) | (io & 0xF) | _d5(reg)]
    if op in (Op.RJMP, Op.RCALL):
        k = a[0]
        _check(-2048 <= k <= 2047, f"relative jump {k} out of range")
        return [(0xC000 if op is Op.RJMP else 0xD000) | (k & 0xFFF)]
    if op in (Op.BRNE, Op.BREQ):
        k = a[0]
        _check(-64 <= k <= 63, f"branch displacement {k} out of range")
        return [(0xF401 if op is Op.BRNE else 0xF001) | ((k & 0x7F) << 3)]
    raise UnsupportedMnemonic(op.value)


# ---------------------------------------------------------------------------
# text form


def _hex(v: int, width: int = 2) -> str:
    return f"0x{v:0{width}x}"


def _rel(k: int) -> str:
    return f".{'+' if k >= 0 else '-'}{abs(2 * k)}"


def format_instruction(insn: Instruction) -> str:
    op, a = insn.op, insn.operands
    m = op.mnemonic
    if op is Op.UNKNOWN:
        return f".word {_hex(a[0], 4)}"
    if not a and op is not Op.LPM:
        return m
    if op is Op.LPM:
        return "lpm"
    if op in (Op.POP, Op.PUSH):
        return f"{m} r{a[0]}"
    if op in (Op.MOVW, Op.MOV, Op.ADD, Op.EOR):
        return f"{m} r{a[0]}, r{a[1]}"
    if op in (Op.LDI, Op.CPI, Op.SUBI, Op.SBCI):
        return f"{m} r{a[0]}, {_hex(a[1])}"
    if op is Op.IN:
        return f"in r{a[0]}, {_hex(a[1])}"
    if op is Op.OUT:
        return f"out {_hex(a[0])}, r{a[1]}"
    if op is Op.ST:
        return f"st Z, r{a[0]}"
    if op is Op.ST_ZP:
        return f"st Z+, r{a[0]}"
    if op is Op.STD:
        return f"std Z+{a[0]}, r{a[1]}"
    if op is Op.LD:
        return f"ld r{a[0]}, Z"
    if op is Op.LD_ZP:
        return f"ld r{a[0]}, Z+"
    if op is Op.LDD:
        return f"ldd r{a[0]}, Z+{a[1]}"
    if op is Op.LPM_Z:
        return f"lpm r{a[0]}, Z"
    if op is Op.LPM_ZP:
        return f"lpm r{a[0]}, Z+"
    if op is Op.STS:
        return f"sts {_hex(a[0], 4)}, r{a[1]}"
    if op is Op.LDS:
        return f"lds r{a[0]}, {_hex(a[1], 4)}"
    if op in (Op.SBI, Op.CBI):
        return f"{m} {_hex(a[0])}, {a[1]}"
    if op in (Op.ADIW, Op.SBIW):
        return f"{m} r{a[0]}, {a[1]}"
    if op in (Op.JMP, Op.CALL):
        return f"{m} {_hex(a[0], 4)}"
    if op in (Op.RJMP, Op.RCALL, Op.BRNE, Op.BREQ):
        return f"{m} {_rel(a[0])}"
    raise UnsupportedMnemonic(op.value)


_REG_RE = re.compile(r"^r(\d{1,2})$", re.IGNORECASE)
_ZDISP_RE = re.compile(r"^z\+(\d+|0x[0-9a-f]+)$", re.IGNORECASE)
_REL_RE = re.compile(r"^\.([+-])(\d+)$")
_LABEL_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


def _parse_reg(tok: str) -> int:
    m = _REG_RE.match(tok)
    if not m:
        raise OperandOutOfRange(f"expected register, got {tok!r}")
    return _reg(int(m.group(1)))


def _parse_int(tok: str) -> int:
    try:
        return int(tok, 0)
    except ValueError:
        raise OperandOutOfRange(f"expected number, got {tok!r}") from None


_SIMPLE = {op.value: op for op in (Op.NOP, Op.RET, Op.RETI, Op.SPM, Op.CLI, Op.SEI, Op.ICALL, Op.IJMP)}
_REG_REG = {"movw": Op.MOVW, "mov": Op.MOV, "add": Op.ADD, "eor": Op.EOR}
_REG_IMM = {"ldi": Op.LDI, "cpi": Op.CPI, "subi": Op.SUBI, "sbci": Op.SBCI}
_BRANCHES = {"rjmp": Op.RJMP, "rcall": Op.RCALL, "brne": Op.BRNE, "breq": Op.BREQ}


def parse_instruction(
    line: str, pc: int = 0, labels: dict[str, int] | None = None
) -> Instruction:
    """Parse one line of assembly text into an Instruction.

    Relative targets take the objdump ``.+N`` byte form or a label name; absolute
    ``jmp``/``call`` targets are word addresses or labels.
    """
    text = line.split(";", 1)[0].strip()
    if not text:
        raise UnsupportedMnemonic("empty line")
    parts = text.split(None, 1)
    m = parts[0].lower()
    ops = [t.strip() for t in parts[1].split(",")] if len(parts) > 1 else []
    labels = labels or {}

    def want(n: int) -> None:
        if len(ops) != n:
            raise OperandOutOfRange(f"{m} takes {n} operand(s), got {len(ops)}")

    def target(tok: str) -> int:
        if tok in labels:
            return labels[tok]
        if _LABEL_RE.match(tok) and not tok.lower().startswith("0x"):
            # forward reference during the sizing pass
            return pc
        return _parse_int(tok)

    def rel(tok: str) -> int:
        rm = _REL_RE.match(tok)
        if rm:
            nbytes = int(rm.group(2))
            if nbytes % 2:
                raise OperandOutOfRange(f"odd byte offset {tok}")
            return (nbytes // 2) * (1 if rm.group(1) == "+" else -1)
        return target(tok) - (pc + 1)

    if m in _SIMPLE:
        want(0)
        return Instruction(_SIMPLE[m])
    if m == ".word":
        want(1)
        return Instruction(Op.UNKNOWN, (_parse_int(ops[0]) & 0xFFFF,))
    if m in ("pop", "push"):
        want(1)
        return Instruction(Op.POP if m == "pop" else Op.PUSH, (_parse_reg(ops[0]),))
    if m in _REG_REG:
        want(2)
        return Instruction(_REG_REG[m], (_parse_reg(ops[0]), _parse_reg(ops[1])))
    if m in _REG_IMM:
        want(2)
        return Instruction(_REG_IMM[m], (_parse_reg(ops[0]), _parse_int(ops[1])))
    if m == "in":
        want(2)
        return Instruction(Op.IN, (_parse_reg(ops[0]), _parse_int(ops[1])))
    if m == "out":
        want(2)
        return Instruction(Op.OUT, (_parse_int(ops[0]), _parse_reg(ops[1])))
    if m in ("st", "std"):
        want(2)
        addr, reg = ops[0].upper(), _parse_reg(ops[1])
        if addr == "Z":
            return Instruction(Op.ST, (reg,))
        if addr == "Z+":
            return Instruction(Op.ST_ZP, (reg,))
        dm = _ZDISP_RE.match(ops[0])
        if dm:
            q = _parse_int(dm.group(1))
            return Instruction(Op.STD, (q, reg)) if q else Instruction(Op.ST, (reg,))
        raise UnsupportedMnemonic(f"{m} {ops[0]} (only Z addressing is supported)")
    if m in ("ld", "ldd", "lpm"):
        if m == "lpm" and not ops:
            return Instruction(Op.LPM)
        want(2)
        reg, addr = _parse_reg(ops[0]), ops[1].upper()
        if m == "lpm":
            if addr == "Z":
                return Instruction(Op.LPM_Z, (reg,))
            if addr == "Z+":
                return Instruction(Op.LPM_ZP, (reg,))
            raise UnsupportedMnemonic(f"lpm {ops[1]}")
        if addr == "Z":
            return Instruction(Op.LD, (reg,))
        if addr == "Z+":
            return Instruction(Op.LD_ZP, (reg,))
        dm = _ZDISP_RE.match(ops[1])
        if dm:
            q = _parse_int(dm.group(1))
            return Instruction(Op.LDD, (reg, q)) if q else Instruction(Op.LD, (reg,))
        raise UnsupportedMnemonic(f"{m} {ops[1]} (only Z addressing is supported)")
    if m == "sts":
        want(2)
        return Instruction(Op.STS, (_parse_int(ops[0]), _parse_reg(ops[1])))
    if m == "lds":
        want(2)
        return Instruction(Op.LDS, (_parse_reg(ops[0]), _parse_int(ops[1])))
    if m in ("sbi", "cbi"):
        want(2)
        return Instruction(Op.SBI if m == "sbi" else Op.CBI, (_parse_int(ops[0]), _parse_int(ops[1])))
    if m in ("adiw", "sbiw"):
        want(2)
        return Instruction(Op.ADIW if m == "adiw" else Op.SBIW, (_parse_reg(ops[0]), _parse_int(ops[1])))
    if m in ("jmp", "call"):
        want(1)
        return Instruction(Op.JMP if m == "jmp" else Op.CALL, (target(ops[0]),))
    if m in _BRANCHES:
        want(1)
        return Instruction(_BRANCHES[m], (rel(ops[0]),))
    raise UnsupportedMnemonic(m)


def assemble(program: Sequence[str | Instruction], origin: int = 0) -> list[int]:
    """Assemble mnemonic lines (or Instruction objects) into 16-bit words.

    Lines ending in ``:`` define labels usable as branch or call targets.
    ``origin`` is the word address of the first instruction.
    """
    labels: dict[str, int] = {}
    pc = origin
    for item in program:
        if isinstance(item, str) and item.strip().endswith(":"):
            labels[item.strip()[:-1]] = pc
            continue
        insn = item if isinstance(item, Instruction) else parse_instruction(item, pc, {})
        pc += insn.width

    words: list[int] = []
    pc = origin
    for item in program:
        if isinstance(item, str) and item.strip().endswith(":"):
            continue
        insn = item if isinstance(item, Instruction) else parse_instruction(item, pc, labels)
        encoded = encode(insn)
        words.extend(encoded)
        pc += len(encoded)
    return words


def decode_words(words: Sequence[int]) -> list[Instruction]:
    """Decode a contiguous word list; a dangling two-word opcode is an error."""
    out: list[Instruction] = []
    i = 0
    while i < len(words):
        trailing = words[i + 1] if i + 1 < len(words) else None
        insn = decode_instruction(words[i], trailing)
        out.append(insn)
        i += insn.width
    return out


def disassemble_range(image: "FirmwareImage", start: int, end: int) -> list[tuple[int, Instruction]]:
    """Linear sweep over ``[start, end)``.

    A two-word opcode whose second word would fall at or beyond ``end`` is
    reported as a one-word Unknown so the widths always sum to ``end - start``.
    """
    if not 0 <= start <= end <= image.size_words:
        raise RangeOutOfBounds(f"range [{start:#x}, {end:#x}) outside image of {image.size_words:#x} words")
    out: list[tuple[int, Instruction]] = []
    addr = start
    while addr < end:
        low = image.read_word(addr)
        if needs_trailing_word(low):
            if addr + 1 >= end:
                insn = Instruction(Op.UNKNOWN, (low,))
            else:
                insn = decode_instruction(low, image.read_word(addr + 1))
        else:
            insn = decode_instruction(low)
        out.append((addr, insn))
        addr += insn.width
    return out


def format_listing(listing: Iterable[tuple[int, Instruction]]) -> str:
    return "\n".join(f"{addr:x}: {insn.text()}" for addr, insn in listing)
