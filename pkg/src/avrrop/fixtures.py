"""Demo firmware images built with the in-package assembler.

The demo image models a sensor node with a vulnerable packet receive
function. It holds the three injection gadgets and the bootloader gadgets used
for flash reprogramming. Gadget entry points sit at fixed word addresses so
that payloads can be compared byte for byte. Everything else is resolved
through the symbol table.
"""

from __future__ import annotations

from .fakestack import DEFAULT_FSP, FRAME_POP_ORDER
from .firmware import FirmwareImage, HarnessInfo, MemoryLayout, image_from_blocks
from .isa import assemble

DEMO_LAYOUT = MemoryLayout(
    data_section=(0x0100, 0x0240),
    bss_section=(0x0240, 0x0300),
    data_load=0x7000,
    stack_floor=0x0F00,
)
DATA_INIT_WORD = DEMO_LAYOUT.data_load // 2
RX_BUFFER = 0x02C0
RECEIVE_SP = 0x1060
DEFAULT_DEST = 0x8000
__all__ = ["DEFAULT_FSP", "DEFAULT_DEST", "demo_firmware", "null_firmware", "sentinel_malware"]

# for (i = 0; i < rcm->buff_len; i++) tmp_buff[i] = rcm->buff[i];
RECEIVE = [
    "in r28, 0x3d",
    "in r29, 0x3e",
    "sbiw r28, 4",  # uint8_t tmp_buff[4]
    "out 0x3e, r29",
    "out 0x3d, r28",
    "movw r30, r24",
    "ld r18, Z+",  # buff_len
    "movw r26, r30",  # source
    "movw r22, r28",
    "subi r22, 0xff",  # destination = Y + 1
    "sbci r23, 0xff",
    "cpi r18, 0x00",
    "breq done",
    "copy:",
    "movw r30, r26",
    "ld r0, Z+",
    "movw r26, r30",
    "movw r30, r22",
    "st Z+, r0",
    "movw r22, r30",
    "subi r18, 0x01",
    "brne copy",
    "done:",
    "adiw r28, 4",
    "out 0x3e, r29",
    "out 0x3d, r28",
    "ret",
]

INJ_GADGET1 = [
    "pop r24",
    "pop r25",
    "pop r19",
    "pop r18",
    "pop r0",
    "out 0x3f, r0",
    "pop r0",
    "pop r1",
    "reti",
]
# same body with the high address byte popped first
INJ_GADGET1_LITERAL = ["pop r25", "pop r24"] + INJ_GADGET1[2:]
INJ_GADGET2 = ["movw r30, r24", "ret"]
INJ_GADGET3 = ["st Z, r18", "ret"]

# longer alternatives so that the synthesizer has several chains to rank
ALT_STORE = ["st Z, r18", "pop r17", "pop r16", "ret"]
ALT_LOADER = [
    "pop r24", "pop r25", "pop r18", "pop r29", "pop r28", "pop r17",
    "pop r16", "pop r15", "pop r14", "pop r13", "pop r12", "ret",
]
IDEAL_GADGET = ["pop r30", "pop r31", "pop r18", "st Z, r18", "ret"]

RP_GADGET1 = ["pop r29", "pop r28", "pop r17", "pop r15", "pop r14", "ret"]
RP_GADGET2 = [
    "in r0, 0x3f",
    "cli",
    "out 0x3e, r29",
    "out 0x3f, r0",
    "out 0x3d, r28",
    *[f"pop r{r}" for r in FRAME_POP_ORDER],
    "ret",
]

# Erase the page at RAMPZ:Z = r16:r15:r14, fill it from the buffer whose address
# is stored at FP+264, write it, then unwind the fake frame and return.
RP_PAGE_PROGRAM = [
    "g3:",
    "ldi r24, 0x03",
    "movw r30, r14",
    "sts 0x005b, r16",
    "sts 0x0068, r24",
    "spm",
    "movw r30, r28",
    "subi r30, 0xf8",  # Z = FP + 264 (&buff_p)
    "sbci r31, 0xfe",
    "ld r26, Z+",
    "ld r27, Z",
    "movw r18, r14",
    "ldi r20, 0x80",
    "fill:",
    "movw r30, r26",
    "ld r0, Z+",
    "ld r1, Z+",
    "movw r26, r30",
    "movw r30, r18",
    "ldi r24, 0x01",
    "sts 0x0068, r24",
    "spm",
    "subi r18, 0xfe",
    "sbci r19, 0xff",
    "subi r20, 0x01",
    "brne fill",
    # page loop counter r9:r6 must be zero to leave the loop
    *[line for r in (6, 7, 8, 9) for line in (f"mov r24, r{r}", "cpi r24, 0x00", "brne g3")],
    "movw r30, r14",
    "ldi r24, 0x05",
    "sts 0x0068, r24",
    "spm",
    "eor r1, r1",
    "movw r30, r28",
    "subi r30, 0xf7",  # SP = FP + 265
    "sbci r31, 0xfe",
    "out 0x3e, r31",
    "out 0x3d, r30",
    *[f"pop r{r}" for r in FRAME_POP_ORDER],
    "ret",
]

SYMBOLS = {
    "reset": 0x0000,
    "main": 0x0046,
    "harness": 0x0500,
    "receive": 0x05C0,
    "inj_gadget1": 0x2B58,
    "inj_gadget2": 0x0185,
    "inj_gadget3": 0x073A,
    "alt_store": 0x0900,
    "alt_loader": 0x3000,
    "rp_gadget1": 0xF93D,
    "rp_page_program": 0xFB4D,
    "rp_gadget2": 0xFBA9,
}


def _data_initializers() -> list[int]:
    n = DEMO_LAYOUT.data_section[1] - DEMO_LAYOUT.data_section[0]
    raw = bytes((i * 7 + 3) & 0xFF for i in range(n + n % 2))
    return [raw[i] | (raw[i + 1] << 8) for i in range(0, len(raw), 2)]


def _base_blocks() -> list[tuple[int, list[int]]]:
    s = SYMBOLS
    return [
        (s["reset"], assemble([f"jmp {s['main']:#x}"], s["reset"])),
        (s["main"], assemble(["rjmp .-2"], s["main"])),
        # call receive(); then idle so a normal return halts the run
        (s["harness"], assemble([f"call {s['receive']:#x}", "rjmp .-2"], s["harness"])),
        (s["receive"], assemble(RECEIVE, s["receive"])),
        (DATA_INIT_WORD, _data_initializers()),
        (s["rp_gadget1"], assemble(RP_GADGET1, s["rp_gadget1"])),
        (s["rp_page_program"], assemble(RP_PAGE_PROGRAM, s["rp_page_program"])),
        (s["rp_gadget2"], assemble(RP_GADGET2, s["rp_gadget2"])),
    ]


def demo_firmware(variant: str = "demo") -> FirmwareImage:
    """Build a demo node image.

    ``demo``: the three-gadget injection chain plus longer alternatives.
    ``literal``: gadget 1 pops r25 before r24.
    ``ideal``: a single pop/pop/pop/store gadget instead of the three-gadget chain.
    ``nostore``: the loader and move gadgets without any store gadget.
    """
    s = dict(SYMBOLS)
    blocks = _base_blocks()
    if variant in ("demo", "literal", "nostore"):
        g1 = INJ_GADGET1_LITERAL if variant == "literal" else INJ_GADGET1
        blocks.append((s["inj_gadget1"], assemble(g1, s["inj_gadget1"])))
        blocks.append((s["inj_gadget2"], assemble(INJ_GADGET2, s["inj_gadget2"])))
        if variant != "nostore":
            blocks.append((s["inj_gadget3"], assemble(INJ_GADGET3, s["inj_gadget3"])))
        if variant == "demo":
            blocks.append((s["alt_store"], assemble(ALT_STORE, s["alt_store"])))
            blocks.append((s["alt_loader"], assemble(ALT_LOADER, s["alt_loader"])))
    elif variant == "ideal":
        s["ideal_gadget"] = 0x1200
        blocks.append((s["ideal_gadget"], assemble(IDEAL_GADGET, s["ideal_gadget"])))
    else:
        raise ValueError(f"unknown demo variant {variant!r}")
    keep = {k: v for k, v in s.items() if any(a <= v < a + len(ws) for a, ws in blocks) or k == "reset"}
    return image_from_blocks(
        blocks,
        symbols=keep,
        layout=DEMO_LAYOUT,
        harness=HarnessInfo(entry=s["harness"], rx_buffer=RX_BUFFER, initial_sp=RECEIVE_SP),
        source=f"fixture:{variant}",
    )


def null_firmware() -> FirmwareImage:
    """An application with no ret anywhere: nothing to chain."""
    blocks = [
        (0x0000, assemble(["jmp 0x46"])),
        (0x0046, assemble(["nop", "rjmp .-2"], 0x0046)),
    ]
    return image_from_blocks(blocks, symbols={"reset": 0, "main": 0x0046}, layout=DEMO_LAYOUT, source="fixture:null")


def sentinel_malware(size: int = 64) -> bytes:
    """Malware that sets DDRA bits 2 and 1 (IO 0x1a) and then idles.

    Sizes below 6 bytes return a truncated prefix, which is only useful for
    schedule-size checks.
    """
    words = assemble(["sbi 0x1a, 2", "sbi 0x1a, 1"])
    fill = max(0, size // 2 - len(words) - 1)
    words += [0x0000] * fill + assemble(["rjmp .-2"])
    raw = b"".join(w.to_bytes(2, "little") for w in words)
    if size % 2:
        raw += b"\x00"
    return raw[:size]
