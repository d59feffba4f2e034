"""Gadget discovery and effect summaries.

A gadget is a straight-line run of supported instructions ending in ``ret`` or
``reti``. Because AVR code is word aligned, every word address is a candidate
entry point; the scan collects the longest run (up to the length limit) that
starts at each address.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Literal, NamedTuple

from .errors import UnmodeledInstruction
from .firmware import FirmwareImage, read_program_word
from .isa import CONTROL_FLOW, TERMINATORS, Instruction, Op, decode_instruction, needs_trailing_word

DEFAULT_MAX_LEN = 32
IO_SPL = 0x3D
IO_SPH = 0x3E
IO_SREG = 0x3F

Section = Literal["all", "application", "bootloader"]


class Sym(NamedTuple):
    """Abstract register content.

    ``kind`` is one of ``init`` (value on gadget entry, ``value`` = register),
    ``slot`` (byte popped from the stack, ``value`` = payload offset),
    ``const`` (known constant) or ``unk``.
    """

    kind: str
    value: int = 0

    def __str__(self) -> str:
        if self.kind == "init":
            return f"r{self.value}"
        if self.kind == "slot":
            return f"stack[{self.value}]"
        if self.kind == "const":
            return f"{self.value:#04x}"
        return "?"


UNK = Sym("unk")


def init(r: int) -> Sym:
    return Sym("init", r)


@dataclass(frozen=True)
class Store:
    """A data-memory write performed by a gadget body.

    ``base`` is ``"Z"`` for indirect stores (address = Z + ``disp``) or
    ``"abs"`` for ``sts`` (address = ``disp``). ``addr_lo``/``addr_hi`` are the
    abstract values of r30/r31 when the store executes.
    """

    base: str
    disp: int
    data_reg: int
    data: Sym
    addr_lo: Sym = UNK
    addr_hi: Sym = UNK

    def describe(self) -> str:
        where = f"Z+{self.disp}" if self.base == "Z" and self.disp else ("Z" if self.base == "Z" else f"{self.disp:#06x}")
        return f"({where}, r{self.data_reg})"


@dataclass(frozen=True)
class EffectSummary:
    pops: tuple[tuple[int, int], ...]
    stores: tuple[Store, ...] = ()
    sp_writes: frozenset[int] = frozenset()
    # abstract source of each SP byte at the moment it was written
    sp_sources: tuple[tuple[int, Sym], ...] = ()
    # number of pops executed before the first SP write; None if SP untouched
    pivot_after_pops: int | None = None
    sreg_write: bool = False
    spm_present: bool = False
    clobbers: frozenset[int] = frozenset()
    io_writes: frozenset[int] = frozenset()
    final: tuple[Sym, ...] = field(default_factory=lambda: tuple(init(r) for r in range(32)))

    @property
    def pop_count(self) -> int:
        return len(self.pops)

    @property
    def written_registers(self) -> frozenset[int]:
        return frozenset(r for r, _ in self.pops) | self.clobbers

    def sp_source(self, io: int) -> Sym | None:
        for a, s in self.sp_sources:
            if a == io:
                return s
        return None

    def to_json(self) -> dict[str, Any]:
        return {
            "pops": [[r, off] for r, off in self.pops],
            "stores": [
                {"base": s.base, "disp": s.disp, "data_reg": s.data_reg} for s in self.stores
            ],
            "sp_writes": sorted(f"{a:#04x}" for a in self.sp_writes),
            "sreg_write": self.sreg_write,
            "spm_present": self.spm_present,
            "clobbers": sorted(self.clobbers),
        }


@dataclass(frozen=True)
class Gadget:
    entry: int
    body: tuple[Instruction, ...]
    effects: EffectSummary | None = None
    unmodeled: str | None = None

    @property
    def terminator(self) -> Op:
        return self.body[-1].op

    @property
    def length(self) -> int:
        return len(self.body)

    @property
    def stack_consumed(self) -> int:
        return sum(1 for i in self.body if i.op is Op.POP) + 2

    @property
    def modeled(self) -> bool:
        return self.effects is not None

    def listing(self) -> list[tuple[int, Instruction]]:
        out, addr = [], self.entry
        for insn in self.body:
            out.append((addr, insn))
            addr += insn.width
        return out

    def text(self) -> str:
        return "; ".join(i.text() for i in self.body)

    def to_json(self) -> dict[str, Any]:
        return {
            "entry": f"{self.entry:#06x}",
            "length": self.length,
            "terminator": self.terminator.value,
            "stack_consumed": self.stack_consumed,
            "disassembly": [f"{a:x}: {i.text()}" for a, i in self.listing()],
            "effects": self.effects.to_json() if self.effects else None,
            "unmodeled": self.unmodeled,
        }


@dataclass(frozen=True)
class ScanConfig:
    max_len: int = DEFAULT_MAX_LEN
    section: Section = "all"

    def __post_init__(self) -> None:
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")


@dataclass(frozen=True)
class GadgetCatalog:
    gadgets: tuple[Gadget, ...]
    image_digest: str
    config: ScanConfig
    bootloader_start: int = 0xF800

    def __len__(self) -> int:
        return len(self.gadgets)

    def __iter__(self):
        return iter(self.gadgets)

    def entries(self) -> list[int]:
        return [g.entry for g in self.gadgets]

    def at(self, entry: int) -> Gadget | None:
        for g in self.gadgets:
            if g.entry == entry:
                return g
        return None

    def modeled(self) -> list[Gadget]:
        return [g for g in self.gadgets if g.effects is not None]

    def to_json(self) -> dict[str, Any]:
        return {
            "image_digest": self.image_digest,
            "config": {"max_len": self.config.max_len, "section": self.config.section},
            "bootloader_start": f"{self.bootloader_start:#06x}",
            "count": len(self.gadgets),
            "gadgets": [g.to_json() for g in self.gadgets],
        }


# ---------------------------------------------------------------------------


def summarize_effects(g: Gadget | Iterable[Instruction]) -> EffectSummary:
    """Abstractly interpret a gadget body.

    Raises UnmodeledInstruction for bodies whose stack effect the algebra cannot
    express (``push``) or that contain control flow before the terminator.
    """
    body = list(g.body if isinstance(g, Gadget) else g)
    if body and body[-1].op in TERMINATORS:
        body = body[:-1]
    regs = [init(r) for r in range(32)]
    pops: list[tuple[int, int]] = []
    stores: list[Store] = []
    sp_writes: set[int] = set()
    sp_sources: list[tuple[int, Sym]] = []
    pivot: int | None = None
    sreg_write = spm = False
    clobbers: set[int] = set()
    io_writes: set[int] = set()

    def clob(*rs: int, value: Sym = UNK) -> None:
        for r in rs:
            regs[r] = value
            clobbers.add(r)

    for insn in body:
        op, a = insn.op, insn.operands
        if op is Op.POP:
            regs[a[0]] = Sym("slot", len(pops))
            pops.append((a[0], len(pops)))
        elif op is Op.MOV:
            clob(a[0], value=regs[a[1]])
        elif op is Op.MOVW:
            lo, hi = regs[a[1]], regs[a[1] + 1]
            clob(a[0], value=lo)
            clob(a[0] + 1, value=hi)
        elif op is Op.LDI:
            clob(a[0], value=Sym("const", a[1]))
        elif op is Op.EOR:
            clob(a[0], value=Sym("const", 0) if a[0] == a[1] else UNK)
        elif op in (Op.ADD, Op.SUBI, Op.SBCI, Op.IN, Op.LD, Op.LDD, Op.LDS, Op.LPM_Z):
            clob(a[0])
        elif op in (Op.ADIW, Op.SBIW):
            clob(a[0], a[0] + 1)
        elif op in (Op.LD_ZP, Op.LPM_ZP):
            clob(a[0], 30, 31)
        elif op is Op.LPM:
            clob(0)
        elif op is Op.OUT:
            io, r = a
            if io in (IO_SPL, IO_SPH):
                if pivot is None:
                    pivot = len(pops)
                sp_writes.add(io)
                sp_sources.append((io, regs[r]))
            elif io == IO_SREG:
                sreg_write = True
            else:
                io_writes.add(io)
        elif op in (Op.ST, Op.STD, Op.ST_ZP):
            r = a[-1]
            disp = a[0] if op is Op.STD else 0
            stores.append(Store("Z", disp, r, regs[r], regs[30], regs[31]))
            if op is Op.ST_ZP:
                clob(30, 31)
        elif op is Op.STS:
            stores.append(Store("abs", a[0], a[1], regs[a[1]]))
        elif op is Op.SPM:
            spm = True
        elif op in (Op.SBI, Op.CBI):
            io_writes.add(a[0])
        elif op in (Op.NOP, Op.CLI, Op.SEI, Op.CPI):
            pass
        else:
            raise UnmodeledInstruction(f"{insn.text()} has no modeled stack effect")

    return EffectSummary(
        pops=tuple(pops),
        stores=tuple(stores),
        sp_writes=frozenset(sp_writes),
        sp_sources=tuple(sp_sources),
        pivot_after_pops=pivot,
        sreg_write=sreg_write,
        spm_present=spm,
        clobbers=frozenset(clobbers),
        io_writes=frozenset(io_writes),
        final=tuple(regs),
    )


def make_gadget(entry: int, body: Iterable[Instruction]) -> Gadget:
    body = tuple(body)
    try:
        return Gadget(entry, body, summarize_effects(body))
    except UnmodeledInstruction as exc:
        return Gadget(entry, body, None, str(exc))


def _section_bounds(image: FirmwareImage, section: Section) -> tuple[int, int]:
    size = image.size_words
    if section == "application":
        return 0, min(size, image.bootloader_start)
    if section == "bootloader":
        return min(size, image.bootloader_start), size
    return 0, size


def scan_gadgets(image: FirmwareImage, config: ScanConfig | None = None) -> GadgetCatalog:
    """Collect every gadget in the selected section of ``image``.

    Decodes each word once, then walks backwards computing for every address the
    number of straight-line instructions needed to reach a terminator.
    """
    config = config or ScanConfig()
    lo, hi = _section_bounds(image, config.section)
    span = hi - lo
    decoded: list[Instruction | None] = [None] * span
    for i in range(span):
        addr = lo + i
        low = read_program_word(image, addr)
        if needs_trailing_word(low):
            if addr + 1 >= hi:
                continue
            decoded[i] = decode_instruction(low, read_program_word(image, addr + 1))
        else:
            decoded[i] = decode_instruction(low)

    inf = config.max_len + 1
    dist = [inf] * (span + 2)
    for i in range(span - 1, -1, -1):
        insn = decoded[i]
        if insn is None or insn.op is Op.UNKNOWN:
            continue
        if insn.op in TERMINATORS:
            dist[i] = 1
        elif insn.op in CONTROL_FLOW:
            continue
        else:
            nxt = i + insn.width
            if nxt < span and dist[nxt] < inf:
                dist[i] = dist[nxt] + 1

    gadgets: list[Gadget] = []
    for i in range(span):
        if dist[i] > config.max_len:
            continue
        body: list[Instruction] = []
        j = i
        while True:
            insn = decoded[j]
            assert insn is not None
            body.append(insn)
            if insn.op in TERMINATORS:
                break
            j += insn.width
        gadgets.append(make_gadget(lo + i, body))
    return GadgetCatalog(tuple(gadgets), image.digest(), config, image.bootloader_start)
