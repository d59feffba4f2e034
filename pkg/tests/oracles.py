"""Independent reference implementations used by the tests."""

from __future__ import annotations

import random
from typing import Sequence

from avrrop.emulator import BootOptions, OutcomeKind, boot, run
from avrrop.firmware import FirmwareImage, read_program_word
from avrrop.gadgets import Gadget
from avrrop.isa import Op, decode_instruction, needs_trailing_word

# (assembly text, encoded words) pairs worked out by hand from the AVR
# instruction set manual's opcode bit patterns
DATASHEET = [
    ("nop", [0x0000]),
    ("ret", [0x9508]),
    ("reti", [0x9518]),
    ("spm", [0x95E8]),
    ("lpm", [0x95C8]),
    ("cli", [0x94F8]),
    ("sei", [0x9478]),
    ("icall", [0x9509]),
    ("ijmp", [0x9409]),
    ("movw r30, r24", [0x01FC]),
    ("movw r30, r14", [0x01F7]),
    ("pop r0", [0x900F]),
    ("pop r24", [0x918F]),
    ("pop r29", [0x91DF]),
    ("push r0", [0x920F]),
    ("push r31", [0x93FF]),
    ("st Z, r18", [0x8320]),
    ("st Z+, r0", [0x9201]),
    ("std Z+10, r22", [0x8762]),
    ("ld r26, Z", [0x81A0]),
    ("ld r0, Z+", [0x9001]),
    ("ldd r24, Z+5", [0x8185]),
    ("in r28, 0x3d", [0xB7CD]),
    ("in r0, 0x3f", [0xB60F]),
    ("out 0x3d, r28", [0xBFCD]),
    ("out 0x3e, r29", [0xBFDE]),
    ("out 0x3f, r0", [0xBE0F]),
    ("sts 0x0068, r24", [0x9380, 0x0068]),
    ("lds r24, 0x0100", [0x9180, 0x0100]),
    ("ldi r24, 0x03", [0xE083]),
    ("ldi r20, 0x80", [0xE840]),
    ("jmp 0x0046", [0x940C, 0x0046]),
    ("call 0x05c0", [0x940E, 0x05C0]),
    ("rjmp .-2", [0xCFFF]),
    ("rcall .+0", [0xD000]),
    ("sbi 0x1a, 2", [0x9AD2]),
    ("cbi 0x1a, 1", [0x98D1]),
    ("adiw r28, 4", [0x9624]),
    ("sbiw r28, 4", [0x9724]),
    ("subi r22, 0xff", [0x5F6F]),
    ("sbci r23, 0xff", [0x4F7F]),
    ("cpi r18, 0x00", [0x3020]),
    ("eor r1, r1", [0x2411]),
    ("mov r24, r6", [0x2D86]),
    ("add r24, r22", [0x0F86]),
    ("lpm r24, Z", [0x9184]),
    ("lpm r0, Z+", [0x9005]),
    ("brne .-16", [0xF7C1]),
    ("breq .+4", [0xF011]),
]


def brute_force_gadgets(image: FirmwareImage, max_len: int) -> set[tuple[int, tuple]]:
    """Walk forward from every word address; keep runs that hit ret/reti."""
    size = image.size_words
    found = set()
    for entry in range(size):
        body = []
        pc = entry
        while len(body) < max_len and pc < size:
            low = read_program_word(image, pc)
            if needs_trailing_word(low):
                if pc + 1 >= size:
                    break
                insn = decode_instruction(low, read_program_word(image, pc + 1))
            else:
                insn = decode_instruction(low)
            if insn.op is Op.UNKNOWN:
                break
            body.append(insn)
            if insn.op in (Op.RET, Op.RETI):
                found.add((entry, tuple(body)))
                break
            if insn.op in (Op.CALL, Op.RCALL, Op.ICALL, Op.JMP, Op.RJMP, Op.IJMP, Op.BRNE, Op.BREQ):
                break
            pc += insn.width
    return found


STACK_BASE = 0x1000
UNUSED = (0x0300, 0x0F00)


def run_sequence(image: FirmwareImage, seq: Sequence[Gadget], pop_bytes: Sequence[Sequence[int]]):
    """Execute gadgets as if their addresses and pop bytes sat on the stack.

    Returns (outcome, machine, sram before the run).
    """
    m = boot(image, BootOptions(layout=image.layout, fuel=400))
    stack = []
    for i, g in enumerate(seq):
        if i:
            stack += [g.entry & 0xFF, g.entry >> 8]
        stack += list(pop_bytes[i])
    stack += [0, 0]
    for i, b in enumerate(stack):
        m.sram[STACK_BASE + i] = b
    m.sp = STACK_BASE - 1
    m.pc = seq[0].entry
    before = bytes(m.sram)
    return run(m), m, before


def _changed(before: bytes, after: bytearray) -> list[int]:
    lo, hi = UNUSED
    return [a for a in range(lo, hi) if before[a] != after[a]]


def write_byte_oracle(image: FirmwareImage, seq: Sequence[Gadget], rng: random.Random) -> bool:
    """Does the sequence write one attacker-chosen byte to an attacker-chosen address?"""
    counts = [sum(1 for i in g.body if i.op is Op.POP) for g in seq]
    n = sum(counts)
    if n < 3:
        return False
    markers = rng.sample(range(0x03, 0x0F), n) if n <= 12 else rng.sample(range(0x03, 0x0F), 12) + rng.sample(range(0x10, 0x100), n - 12)
    split, k = [], 0
    for c in counts:
        split.append(markers[k : k + c])
        k += c
    out, m, before = run_sequence(image, seq, split)
    if out.kind is not OutcomeKind.SOFT_REBOOT:
        return False
    changed = _changed(before, m.sram)
    if len(changed) != 1:
        return False
    addr, val = changed[0], m.sram[changed[0]]
    try:
        lo_i, hi_i, v_i = markers.index(addr & 0xFF), markers.index(addr >> 8), markers.index(val)
    except ValueError:
        return False
    if len({lo_i, hi_i, v_i}) != 3:
        return False
    for _ in range(3):
        target = rng.randrange(*UNUSED)
        value = rng.randrange(256)
        flat = [0] * n
        flat[lo_i], flat[hi_i], flat[v_i] = target & 0xFF, target >> 8, value
        split, k = [], 0
        for c in counts:
            split.append(flat[k : k + c])
            k += c
        out, m, before = run_sequence(image, seq, split)
        if out.kind is not OutcomeKind.SOFT_REBOOT or m.sram[target] != value:
            return False
        if [a for a in _changed(before, m.sram) if a != target]:
            return False
    return True


def payload_length(seq: Sequence[Gadget]) -> int:
    return sum(2 + sum(1 for i in g.body if i.op is Op.POP) for g in seq) + 2


def random_image(rng: random.Random, size: int) -> FirmwareImage:
    """Flash content biased toward gadget-forming words."""
    from avrrop.isa import assemble

    pool = [
        lambda: [0x9508],
        lambda: [0x9518],
        lambda: assemble([f"pop r{rng.randrange(32)}"]),
        lambda: assemble([f"push r{rng.randrange(32)}"]),
        lambda: assemble([f"movw r{2 * rng.randrange(16)}, r{2 * rng.randrange(16)}"]),
        lambda: assemble([f"st Z, r{rng.randrange(32)}"]),
        lambda: assemble([f"std Z+{rng.randrange(1, 64)}, r{rng.randrange(32)}"]),
        lambda: assemble([f"out {rng.choice([0x3d, 0x3e, 0x3f, 0x1a])}, r{rng.randrange(32)}"]),
        lambda: assemble([f"ldi r{rng.randrange(16, 32)}, {rng.randrange(256)}"]),
        lambda: assemble([f"sts {rng.randrange(0x1100)}, r{rng.randrange(32)}"]),
        lambda: assemble([f"jmp {rng.randrange(0x8000)}"]),
        lambda: assemble([f"brne .{rng.randrange(-64, 63) * 2:+d}"]),
        lambda: [0x95E8],
        lambda: [rng.randrange(0x10000)],
        lambda: [rng.randrange(0x10000)],
        lambda: [0x940C],  # dangling two-word opcode
    ]
    words: list[int] = []
    while len(words) < size:
        words.extend(rng.choice(pool)())
    return FirmwareImage(tuple(words[:size]))
