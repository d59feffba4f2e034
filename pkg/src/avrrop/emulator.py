"""Instruction-level emulator of an ATmega128-class sensor node.

The data space is one 0x1100-byte array: registers live at 0x00-0x1F and the
IO registers at 0x20-0xFF, so a store through Z can hit either, exactly like
on the real part. Instruction fetch only ever reads ``flash``.

Return addresses are stored low byte at the lower address: ``call`` pushes
the high byte first, ``ret`` pops the low byte first.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Literal, TextIO

from .errors import PacketTooLarge, RangeOutOfBounds
from .firmware import ERASED_WORD, FLASH_WORDS, PAGE_BYTES, PAGE_WORDS, RAM_END, FirmwareImage, MemoryLayout
from .isa import Instruction, Op, decode_instruction, needs_trailing_word

RAMEND = RAM_END - 1  # 0x10FF, highest data address
IO_BASE = 0x20
SPL = 0x5D
SPH = 0x5E
SREG = 0x5F
RAMPZ = 0x5B
SPMCSR = 0x68
MAX_PACKET_PAYLOAD = 28

FLAG_C, FLAG_Z, FLAG_N, FLAG_V, FLAG_S, FLAG_I = 0, 1, 2, 3, 4, 7


class OutcomeKind(enum.Enum):
    SOFT_REBOOT = "SoftReboot"
    HALTED = "Halted"
    FUEL_EXHAUSTED = "FuelExhausted"
    FAULT = "Fault"


@dataclass(frozen=True)
class RunOutcome:
    kind: OutcomeKind
    instructions: int = 0
    pc: int = 0
    reason: str | None = None
    watch_hits: frozenset[int] = frozenset()

    @property
    def rebooted(self) -> bool:
        return self.kind is OutcomeKind.SOFT_REBOOT

    def to_json(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "reason": self.reason,
            "instructions": self.instructions,
            "pc": f"{self.pc:#06x}",
            "watch_hits": sorted(f"{a:#06x}" for a in self.watch_hits),
        }


@dataclass(frozen=True)
class BootOptions:
    layout: MemoryLayout | None = None
    cleanup_enabled: bool = False
    fuel: int = 1_000_000
    max_packet_payload: int = MAX_PACKET_PAYLOAD
    spm_erase: int = 0x03
    spm_fill: int = 0x01
    spm_write: int = 0x05

    def __post_init__(self) -> None:
        if self.fuel <= 0:
            raise ValueError("fuel must be positive")


@dataclass
class MachineState:
    image: FirmwareImage
    opts: BootOptions
    flash: list[int]
    sram: bytearray = field(default_factory=lambda: bytearray(RAM_END))
    pc: int = 0
    spm_page_buffer: bytearray = field(default_factory=lambda: bytearray(b"\xff" * PAGE_BYTES))
    reboot_count: int = 0
    cycle_count: int = 0
    halted: bool = False
    spm_refused: int = 0
    _decoded: dict[int, Instruction] = field(default_factory=dict, repr=False)

    # register / IO views over the data space

    @property
    def layout(self) -> MemoryLayout | None:
        return self.opts.layout or self.image.layout

    @property
    def regs(self) -> bytes:
        return bytes(self.sram[0:32])

    @property
    def sp(self) -> int:
        return self.sram[SPL] | (self.sram[SPH] << 8)

    @sp.setter
    def sp(self, value: int) -> None:
        value %= RAM_END
        self.sram[SPL] = value & 0xFF
        self.sram[SPH] = value >> 8

    @property
    def sreg(self) -> int:
        return self.sram[SREG]

    @property
    def spmcsr_mode(self) -> str:
        v = self.sram[SPMCSR] & 0x07
        o = self.opts
        return {0: "Idle", o.spm_erase: "Erase", o.spm_fill: "Fill", o.spm_write: "Write"}.get(v, "Idle")

    def read(self, addr: int) -> int:
        return self.sram[addr % RAM_END]

    def write(self, addr: int, value: int) -> None:
        addr %= RAM_END
        self.sram[addr] = value & 0xFF
        if addr in (SPL, SPH) and self.sp > RAMEND:
            self.sp = self.sp

    def push(self, value: int) -> None:
        sp = self.sp
        self.sram[sp] = value & 0xFF
        self.sp = sp - 1

    def pop(self) -> int:
        sp = (self.sp + 1) % RAM_END
        self.sp = sp
        return self.sram[sp]

    def fetch(self, pc: int) -> Instruction:
        insn = self._decoded.get(pc)
        if insn is None:
            low = self.flash[pc]
            trailing = self.flash[(pc + 1) % FLASH_WORDS] if needs_trailing_word(low) else None
            insn = decode_instruction(low, trailing)
            self._decoded[pc] = insn
        return insn

    def invalidate(self, first_word: int, count: int) -> None:
        for a in range(first_word - 1, first_word + count):
            self._decoded.pop(a % FLASH_WORDS, None)

    def flash_bytes(self, start_word: int, end_word: int) -> bytes:
        return b"".join(w.to_bytes(2, "little") for w in self.flash[start_word:end_word])

    def snapshot(self) -> dict[str, Any]:
        import hashlib

        return {
            "pc": f"{self.pc:#06x}",
            "sp": f"{self.sp:#06x}",
            "sreg": f"{self.sreg:#04x}",
            "regs": [f"{r:#04x}" for r in self.regs],
            "reboot_count": self.reboot_count,
            "cycle_count": self.cycle_count,
            "halted": self.halted,
            "spmcsr_mode": self.spmcsr_mode,
            "spm_refused": self.spm_refused,
            "sram_sha256": hashlib.sha256(bytes(self.sram)).hexdigest(),
            "flash_sha256": hashlib.sha256(self.flash_bytes(0, FLASH_WORDS)).hexdigest(),
        }

    def snapshot_json(self) -> str:
        return json.dumps(self.snapshot(), indent=2)


# ---------------------------------------------------------------------------
# boot / reboot


def _initialize(state: MachineState) -> None:
    """What the C runtime does on every (re)start: .data, .bss, SP, SREG."""
    sram = state.sram
    sram[0:32] = bytes(32)
    layout = state.layout
    if layout is not None:
        ds, de = layout.data_section
        if de > ds:
            init_bytes = state.flash_bytes(layout.data_load // 2, (layout.data_load + (de - ds) + 2) // 2)
            skew = layout.data_load % 2
            sram[ds:de] = init_bytes[skew : skew + (de - ds)]
        bs, be = layout.bss_section
        sram[bs:be] = bytes(be - bs)
        if state.opts.cleanup_enabled:
            # count = RAMEND - __bss_end; while (count--) *dest++ = 0;
            sram[be:RAMEND] = bytes(RAMEND - be)
    sram[SREG] = 0
    state.sp = RAMEND
    state.pc = 0
    state.halted = False


def boot(image: FirmwareImage, opts: BootOptions | None = None) -> MachineState:
    """Power-on boot: fresh SRAM (all 0x00), flash copied from ``image``."""
    opts = opts or BootOptions(layout=image.layout)
    flash = list(image.program) + [ERASED_WORD] * (FLASH_WORDS - image.size_words)
    state = MachineState(image=image, opts=opts, flash=flash)
    _initialize(state)
    return state


def soft_reboot(state: MachineState) -> MachineState:
    """Re-run startup code without touching SRAM outside .data/.bss (unless cleanup)."""
    state.reboot_count += 1
    _initialize(state)
    return state


# ---------------------------------------------------------------------------
# execution


def _set_flag(sram: bytearray, bit: int, on: bool) -> None:
    if on:
        sram[SREG] |= 1 << bit
    else:
        sram[SREG] &= ~(1 << bit) & 0xFF


def _flags_sub(sram: bytearray, d: int, k: int, res: int, borrow: bool, keep_z: bool = False) -> None:
    r8 = res & 0xFF
    v = bool(((d ^ k) & (d ^ r8)) & 0x80)
    n = bool(r8 & 0x80)
    _set_flag(sram, FLAG_C, borrow)
    if keep_z:
        _set_flag(sram, FLAG_Z, r8 == 0 and bool(sram[SREG] & (1 << FLAG_Z)))
    else:
        _set_flag(sram, FLAG_Z, r8 == 0)
    _set_flag(sram, FLAG_N, n)
    _set_flag(sram, FLAG_V, v)
    _set_flag(sram, FLAG_S, n ^ v)


def _return(state: MachineState, reti: bool) -> RunOutcome | None:
    lo = state.pop()
    hi = state.pop()
    state.pc = (hi << 8) | lo
    if reti:
        _set_flag(state.sram, FLAG_I, True)
    if state.pc == 0:
        return RunOutcome(OutcomeKind.SOFT_REBOOT, pc=0)
    return None


def _call(state: MachineState, ret_addr: int, target: int) -> None:
    state.push(ret_addr >> 8)
    state.push(ret_addr & 0xFF)
    state.pc = target % FLASH_WORDS


def _spm(state: MachineState, pc: int) -> RunOutcome | None:
    image, o, sram = state.image, state.opts, state.sram
    if pc < image.bootloader_start:
        return RunOutcome(OutcomeKind.FAULT, pc=pc, reason="SpmOutsideBootloader")
    mode = sram[SPMCSR] & 0x07
    addr = (sram[RAMPZ] << 16) | sram[30] | (sram[31] << 8)
    page_word = (addr >> 1) & ~(PAGE_WORDS - 1)
    if mode == o.spm_fill:
        idx = addr & (PAGE_BYTES - 2)
        state.spm_page_buffer[idx] = sram[0]
        state.spm_page_buffer[idx + 1] = sram[1]
    elif mode in (o.spm_erase, o.spm_write):
        if page_word >= image.bootloader_start or page_word + PAGE_WORDS > FLASH_WORDS:
            # boot lock: the bootloader section cannot rewrite itself
            state.spm_refused += 1
        elif mode == o.spm_erase:
            state.flash[page_word : page_word + PAGE_WORDS] = [ERASED_WORD] * PAGE_WORDS
            state.invalidate(page_word, PAGE_WORDS)
        else:
            buf = state.spm_page_buffer
            state.flash[page_word : page_word + PAGE_WORDS] = [
                buf[2 * i] | (buf[2 * i + 1] << 8) for i in range(PAGE_WORDS)
            ]
            state.invalidate(page_word, PAGE_WORDS)
            state.spm_page_buffer[:] = b"\xff" * PAGE_BYTES
    sram[SPMCSR] &= 0xF8
    return None


def step(state: MachineState) -> RunOutcome | None:
    """Execute one instruction. Returns a RunOutcome when execution must stop."""
    pc = state.pc
    insn = state.fetch(pc)
    op, a = insn.op, insn.operands
    sram = state.sram
    nxt = (pc + insn.width) % FLASH_WORDS
    state.pc = nxt
    state.cycle_count += _CYCLES.get(op, 1)

    if op is Op.POP:
        sram[a[0]] = state.pop()
    elif op is Op.PUSH:
        state.push(sram[a[0]])
    elif op is Op.MOVW:
        sram[a[0]] = sram[a[1]]
        sram[a[0] + 1] = sram[a[1] + 1]
    elif op is Op.MOV:
        sram[a[0]] = sram[a[1]]
    elif op is Op.LDI:
        sram[a[0]] = a[1]
    elif op is Op.LD or op is Op.LDD or op is Op.LD_ZP:
        z = sram[30] | (sram[31] << 8)
        q = a[1] if op is Op.LDD else 0
        value = state.read(z + q)
        if op is Op.LD_ZP:
            z = (z + 1) & 0xFFFF
            sram[30], sram[31] = z & 0xFF, z >> 8
        sram[a[0]] = value
    elif op is Op.ST or op is Op.STD or op is Op.ST_ZP:
        z = sram[30] | (sram[31] << 8)
        q = a[0] if op is Op.STD else 0
        value = sram[a[-1]]
        if op is Op.ST_ZP:
            nz = (z + 1) & 0xFFFF
            sram[30], sram[31] = nz & 0xFF, nz >> 8
        state.write(z + q, value)
    elif op is Op.SUBI or op is Op.CPI or op is Op.SBCI:
        d, k = sram[a[0]], a[1]
        carry = 1 if (op is Op.SBCI and sram[SREG] & 1) else 0
        res = d - k - carry
        _flags_sub(sram, d, k, res, k + carry > d, keep_z=op is Op.SBCI)
        if op is not Op.CPI:
            sram[a[0]] = res & 0xFF
    elif op is Op.BRNE or op is Op.BREQ:
        z = bool(sram[SREG] & (1 << FLAG_Z))
        if z == (op is Op.BREQ):
            state.pc = (nxt + a[0]) % FLASH_WORDS
    elif op is Op.RET or op is Op.RETI:
        return _return(state, op is Op.RETI)
    elif op is Op.RJMP:
        if a[0] == -1:
            state.pc = pc
            state.halted = True
            return RunOutcome(OutcomeKind.HALTED, pc=pc)
        state.pc = (nxt + a[0]) % FLASH_WORDS
    elif op is Op.JMP:
        state.pc = a[0] % FLASH_WORDS
    elif op is Op.IJMP:
        state.pc = sram[30] | (sram[31] << 8)
        if state.pc == 0:
            return RunOutcome(OutcomeKind.SOFT_REBOOT, pc=0)
    elif op is Op.CALL:
        _call(state, nxt, a[0])
    elif op is Op.RCALL:
        _call(state, nxt, nxt + a[0])
    elif op is Op.ICALL:
        _call(state, nxt, sram[30] | (sram[31] << 8))
        if state.pc == 0:
            return RunOutcome(OutcomeKind.SOFT_REBOOT, pc=0)
    elif op is Op.IN:
        sram[a[0]] = sram[IO_BASE + a[1]]
    elif op is Op.OUT:
        state.write(IO_BASE + a[0], sram[a[1]])
    elif op is Op.STS:
        state.write(a[0], sram[a[1]])
    elif op is Op.LDS:
        sram[a[0]] = state.read(a[1])
    elif op is Op.ADD:
        d, r = sram[a[0]], sram[a[1]]
        res = d + r
        r8 = res & 0xFF
        v = bool(~(d ^ r) & (d ^ r8) & 0x80)
        n = bool(r8 & 0x80)
        _set_flag(sram, FLAG_C, res > 0xFF)
        _set_flag(sram, FLAG_Z, r8 == 0)
        _set_flag(sram, FLAG_N, n)
        _set_flag(sram, FLAG_V, v)
        _set_flag(sram, FLAG_S, n ^ v)
        sram[a[0]] = r8
    elif op is Op.EOR:
        r8 = sram[a[0]] ^ sram[a[1]]
        sram[a[0]] = r8
        _set_flag(sram, FLAG_Z, r8 == 0)
        _set_flag(sram, FLAG_N, bool(r8 & 0x80))
        _set_flag(sram, FLAG_V, False)
        _set_flag(sram, FLAG_S, bool(r8 & 0x80))
    elif op is Op.ADIW or op is Op.SBIW:
        d = sram[a[0]] | (sram[a[0] + 1] << 8)
        res = d + a[1] if op is Op.ADIW else d - a[1]
        r16 = res & 0xFFFF
        sram[a[0]], sram[a[0] + 1] = r16 & 0xFF, r16 >> 8
        n = bool(r16 & 0x8000)
        if op is Op.ADIW:
            v = not (d & 0x8000) and n
            c = res > 0xFFFF
        else:
            v = bool(d & 0x8000) and not n
            c = res < 0
        _set_flag(sram, FLAG_C, c)
        _set_flag(sram, FLAG_Z, r16 == 0)
        _set_flag(sram, FLAG_N, n)
        _set_flag(sram, FLAG_V, v)
        _set_flag(sram, FLAG_S, n ^ v)
    elif op is Op.SBI or op is Op.CBI:
        addr = IO_BASE + a[0]
        if op is Op.SBI:
            sram[addr] |= 1 << a[1]
        else:
            sram[addr] &= ~(1 << a[1]) & 0xFF
    elif op is Op.CLI or op is Op.SEI:
        _set_flag(sram, FLAG_I, op is Op.SEI)
    elif op is Op.LPM or op is Op.LPM_Z or op is Op.LPM_ZP:
        z = sram[30] | (sram[31] << 8)
        full = (sram[RAMPZ] << 16) | z
        word = state.flash[(full >> 1) % FLASH_WORDS]
        value = (word >> 8) if full & 1 else (word & 0xFF)
        if op is Op.LPM_ZP:
            z = (z + 1) & 0xFFFF
            sram[30], sram[31] = z & 0xFF, z >> 8
        sram[0 if op is Op.LPM else a[0]] = value
    elif op is Op.SPM:
        return _spm(state, pc)
    elif op is Op.NOP:
        pass
    else:
        state.pc = pc
        return RunOutcome(OutcomeKind.FAULT, pc=pc, reason="UnknownInstruction")
    return None


_CYCLES = {
    Op.RET: 4, Op.RETI: 4, Op.CALL: 4, Op.RCALL: 3, Op.ICALL: 3, Op.JMP: 3, Op.RJMP: 2,
    Op.IJMP: 2, Op.POP: 2, Op.PUSH: 2, Op.LD: 2, Op.LDD: 2, Op.LD_ZP: 2, Op.ST: 2,
    Op.STD: 2, Op.ST_ZP: 2, Op.LDS: 2, Op.STS: 2, Op.ADIW: 2, Op.SBIW: 2, Op.LPM: 3,
    Op.LPM_Z: 3, Op.LPM_ZP: 3,
}


def run(
    state: MachineState,
    fuel: int | None = None,
    watch: Iterable[int] = (),
    trace: TextIO | Callable[[str], Any] | None = None,
) -> RunOutcome:
    """Step until reboot, halt, fault, or ``fuel`` instructions have executed.

    ``watch`` is a set of word addresses whose execution is reported in
    ``RunOutcome.watch_hits``.
    """
    if state.halted:
        return RunOutcome(OutcomeKind.HALTED, pc=state.pc)
    fuel = state.opts.fuel if fuel is None else fuel
    watch = frozenset(watch)
    hits: set[int] = set()
    emit = None
    if trace is not None:
        emit = trace.write if hasattr(trace, "write") else trace  # type: ignore[union-attr]
    for n in range(fuel):
        pc = state.pc
        if pc in watch:
            hits.add(pc)
        if emit is not None:
            line = f"{state.cycle_count} {pc:04x} {state.fetch(pc).text()} sp={state.sp:04x}\n"
            emit(line)
        outcome = step(state)
        if outcome is not None:
            return RunOutcome(outcome.kind, n + 1, outcome.pc, outcome.reason, frozenset(hits))
    return RunOutcome(OutcomeKind.FUEL_EXHAUSTED, fuel, state.pc, None, frozenset(hits))


def deliver_packet(
    state: MachineState,
    payload: bytes,
    opts: BootOptions | None = None,
    buff_len: int | None = None,
    watch: Iterable[int] = (),
    trace: TextIO | Callable[[str], Any] | None = None,
) -> RunOutcome:
    """Hand ``payload`` to the vulnerable receive function and run it.

    The modeled message is ``[buff_len, payload...]``; ``buff_len`` defaults to
    ``len(payload)``. Bytes past ``buff_len`` stay in the message buffer only.
    """
    opts = opts or state.opts
    payload = bytes(payload)
    if len(payload) > opts.max_packet_payload:
        raise PacketTooLarge(f"payload of {len(payload)} bytes exceeds {opts.max_packet_payload}")
    harness = state.image.harness
    if harness is None:
        raise ValueError(f"image {state.image.source or '<anon>'} exposes no receive harness")
    length = len(payload) if buff_len is None else buff_len
    if not 0 <= length <= 0xFF:
        raise PacketTooLarge(f"buff_len {length} does not fit the one-byte length field")
    for i, b in enumerate(bytes([length]) + payload):
        state.write(harness.rx_buffer + i, b)
    state.sp = harness.initial_sp
    state.sram[24] = harness.rx_buffer & 0xFF
    state.sram[25] = harness.rx_buffer >> 8
    state.pc = harness.entry
    state.halted = False
    return run(state, opts.fuel, watch=watch, trace=trace)


def inspect(
    state: MachineState, space: Literal["flash", "sram", "regs"], start: int, end: int
) -> bytes:
    """Read-only copy of a range. Flash ranges are word addresses; others are bytes."""
    limits = {"flash": FLASH_WORDS, "sram": RAM_END, "regs": 32}
    if space not in limits:
        raise ValueError(f"unknown space {space!r}")
    if not 0 <= start <= end <= limits[space]:
        raise RangeOutOfBounds(f"{space} range [{start:#x}, {end:#x}) out of bounds")
    if space == "flash":
        return state.flash_bytes(start, end)
    return bytes(state.sram[start:end])
