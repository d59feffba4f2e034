"""Firmware images: Intel HEX I/O, word-addressed flash, sidecar metadata."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from .errors import AddressOverflow, ChecksumMismatch, MalformedRecord

FLASH_WORDS = 0x10000
PAGE_WORDS = 128
PAGE_BYTES = 2 * PAGE_WORDS
ERASED_WORD = 0xFFFF
DEFAULT_BOOTLOADER_START = 0xF800

REGISTER_FILE_END = 0x0020
IO_END = 0x0100
RAM_END = 0x1100


@dataclass(frozen=True)
class MemoryLayout:
    """Data-space layout. Ranges are half-open byte ranges ``(start, end)``."""

    data_section: tuple[int, int] = (IO_END, IO_END)
    bss_section: tuple[int, int] = (IO_END, IO_END)
    # byte address in flash holding the .data initializers
    data_load: int = 0
    # lowest address the live stack is allowed to reach
    stack_floor: int = 0x0F00
    register_file_end: int = REGISTER_FILE_END
    io_end: int = IO_END
    ram_end: int = RAM_END

    def __post_init__(self) -> None:
        ds, de = self.data_section
        bs, be = self.bss_section
        ok = (
            REGISTER_FILE_END <= self.io_end <= ds <= de <= bs <= be <= self.stack_floor <= self.ram_end
            and self.ram_end == RAM_END
        )
        if not ok:
            raise ValueError(f"inconsistent memory layout: {self}")

    @property
    def bss_end(self) -> int:
        return self.bss_section[1]

    @property
    def unused_region(self) -> tuple[int, int]:
        return (self.bss_end, self.stack_floor)

    def to_json(self) -> dict[str, Any]:
        return {
            "data_section": [f"{a:#06x}" for a in self.data_section],
            "bss_section": [f"{a:#06x}" for a in self.bss_section],
            "data_load": f"{self.data_load:#x}",
            "stack_floor": f"{self.stack_floor:#06x}",
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "MemoryLayout":
        return cls(
            data_section=tuple(_int(a) for a in obj["data_section"]),  # type: ignore[arg-type]
            bss_section=tuple(_int(a) for a in obj["bss_section"]),  # type: ignore[arg-type]
            data_load=_int(obj.get("data_load", 0)),
            stack_floor=_int(obj.get("stack_floor", 0x0F00)),
        )


@dataclass(frozen=True)
class HarnessInfo:
    """Where the packet-delivery harness enters the vulnerable receive path.

    ``entry`` is a word address that calls the receive function and then idles;
    ``rx_buffer`` is the data address of the modeled message; ``initial_sp`` is the
    stack pointer in effect just before the call.
    """

    entry: int
    rx_buffer: int
    initial_sp: int = 0x1060

    def to_json(self) -> dict[str, str]:
        return {
            "entry": f"{self.entry:#06x}",
            "rx_buffer": f"{self.rx_buffer:#06x}",
            "initial_sp": f"{self.initial_sp:#06x}",
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "HarnessInfo":
        return cls(_int(obj["entry"]), _int(obj["rx_buffer"]), _int(obj.get("initial_sp", 0x1060)))


@dataclass(frozen=True)
class FirmwareImage:
    program: tuple[int, ...]
    bootloader_start: int = DEFAULT_BOOTLOADER_START
    symbols: Mapping[str, int] = field(default_factory=dict)
    layout: MemoryLayout | None = None
    harness: HarnessInfo | None = None
    source: str = ""

    def __post_init__(self) -> None:
        if len(self.program) > FLASH_WORDS:
            raise AddressOverflow(f"image has {len(self.program)} words, max {FLASH_WORDS}")
        if not 0 <= self.bootloader_start <= FLASH_WORDS or self.bootloader_start % PAGE_WORDS:
            raise ValueError(f"bootloader_start {self.bootloader_start:#x} is not a page-aligned word address")

    @property
    def size_words(self) -> int:
        return len(self.program)

    def read_word(self, addr: int) -> int:
        return read_program_word(self, addr)

    def digest(self) -> str:
        h = hashlib.sha256()
        for w in self.program:
            h.update(w.to_bytes(2, "little"))
        return h.hexdigest()

    def symbol(self, name: str) -> int:
        try:
            return self.symbols[name]
        except KeyError:
            raise KeyError(f"image {self.source or '<anon>'} has no symbol {name!r}") from None

    def app_code_bytes(self) -> int:
        """Bytes up to the last non-erased word of the application section."""
        top = min(self.bootloader_start, len(self.program))
        for addr in range(top - 1, -1, -1):
            if self.program[addr] != ERASED_WORD:
                return 2 * (addr + 1)
        return 0

    def with_meta(self, **changes: Any) -> "FirmwareImage":
        fields = dict(
            program=self.program,
            bootloader_start=self.bootloader_start,
            symbols=self.symbols,
            layout=self.layout,
            harness=self.harness,
            source=self.source,
        )
        fields.update(changes)
        return FirmwareImage(**fields)


def _int(v: Any) -> int:
    return int(v, 0) if isinstance(v, str) else int(v)


def read_program_word(image: FirmwareImage, addr: int) -> int:
    if not 0 <= addr < FLASH_WORDS:
        raise AddressOverflow(f"word address {addr:#x} outside flash")
    if addr < len(image.program):
        return image.program[addr]
    return ERASED_WORD


def image_from_blocks(
    blocks: Iterable[tuple[int, list[int]]], size_words: int | None = None, **meta: Any
) -> FirmwareImage:
    """Build an image from ``(word address, words)`` blocks over erased flash."""
    blocks = list(blocks)
    top = max((a + len(ws) for a, ws in blocks), default=0)
    size = max(top, size_words or 0)
    if size > FLASH_WORDS:
        raise AddressOverflow(f"blocks extend to word {size:#x}")
    words = [ERASED_WORD] * size
    for addr, ws in blocks:
        words[addr : addr + len(ws)] = ws
    return FirmwareImage(tuple(words), **meta)


# ---------------------------------------------------------------------------
# Intel HEX


def load_intel_hex(text: str) -> FirmwareImage:
    """Parse Intel HEX text into a word image; unwritten bytes read as 0xFF."""
    data: dict[int, int] = {}
    base = 0
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if not line.startswith(":"):
            raise MalformedRecord(f"line {lineno}: missing ':'")
        try:
            rec = bytes.fromhex(line[1:])
        except ValueError:
            raise MalformedRecord(f"line {lineno}: bad hex digits") from None
        if len(rec) < 5 or len(rec) != rec[0] + 5:
            raise MalformedRecord(f"line {lineno}: length field does not match record")
        if sum(rec) & 0xFF:
            raise ChecksumMismatch(f"line {lineno}: checksum {rec[-1]:#04x} does not match")
        count, offset, rtype = rec[0], (rec[1] << 8) | rec[2], rec[3]
        payload = rec[4 : 4 + count]
        if rtype == 0x00:
            for i, b in enumerate(payload):
                addr = base + offset + i
                if addr >= 2 * FLASH_WORDS:
                    raise AddressOverflow(f"line {lineno}: byte address {addr:#x} beyond 128 KB")
                data[addr] = b
        elif rtype == 0x01:
            break
        elif rtype == 0x02:
            if count != 2:
                raise MalformedRecord(f"line {lineno}: segment record needs 2 bytes")
            base = ((payload[0] << 8) | payload[1]) << 4
        elif rtype == 0x04:
            if count != 2:
                raise MalformedRecord(f"line {lineno}: linear address record needs 2 bytes")
            base = ((payload[0] << 8) | payload[1]) << 16
        elif rtype in (0x03, 0x05):
            continue  # start address records carry no flash content
        else:
            raise MalformedRecord(f"line {lineno}: unknown record type {rtype:#04x}")
    else:
        if text.strip():
            raise MalformedRecord("missing EOF record")

    if not data:
        return FirmwareImage(())
    nbytes = max(data) + 1
    nwords = (nbytes + 1) // 2
    words = [
        data.get(2 * i, 0xFF) | (data.get(2 * i + 1, 0xFF) << 8) for i in range(nwords)
    ]
    return FirmwareImage(tuple(words))


def _record(rtype: int, offset: int, payload: bytes) -> str:
    body = bytes([len(payload), (offset >> 8) & 0xFF, offset & 0xFF, rtype]) + payload
    return ":" + (body + bytes([(-sum(body)) & 0xFF])).hex().upper()


def dump_intel_hex(image: FirmwareImage, skip_erased: bool = True) -> str:
    """Serialize to Intel HEX, 16 data bytes per record.

    Erased 16-byte rows are skipped when ``skip_erased`` is set (the final row is
    always kept so the image length survives a reload).
    """
    raw = b"".join(w.to_bytes(2, "little") for w in image.program)
    lines: list[str] = []
    upper = -1
    for start in range(0, len(raw), 16):
        chunk = raw[start : start + 16]
        last = start + 16 >= len(raw)
        if skip_erased and not last and chunk == b"\xff" * len(chunk):
            continue
        if start >> 16 != upper:
            upper = start >> 16
            lines.append(_record(0x04, 0, upper.to_bytes(2, "big")))
        lines.append(_record(0x00, start & 0xFFFF, chunk))
    lines.append(":00000001FF")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# sidecar metadata


def sidecar_json(image: FirmwareImage) -> dict[str, Any]:
    out: dict[str, Any] = {
        "bootloader_start": f"{image.bootloader_start:#06x}",
        "symbols": {k: f"{v:#06x}" for k, v in sorted(image.symbols.items())},
    }
    if image.layout is not None:
        out["layout"] = image.layout.to_json()
    if image.harness is not None:
        out["harness"] = image.harness.to_json()
    return out


def apply_sidecar(image: FirmwareImage, meta: Mapping[str, Any]) -> FirmwareImage:
    return image.with_meta(
        bootloader_start=_int(meta.get("bootloader_start", DEFAULT_BOOTLOADER_START)),
        symbols={k: _int(v) for k, v in meta.get("symbols", {}).items()},
        layout=MemoryLayout.from_json(meta["layout"]) if "layout" in meta else None,
        harness=HarnessInfo.from_json(meta["harness"]) if "harness" in meta else None,
    )


def load_firmware(hex_path: str | Path, sidecar: str | Path | None = None) -> FirmwareImage:
    """Load ``foo.hex`` plus its sidecar (``foo.json`` next to it by default)."""
    hex_path = Path(hex_path)
    image = load_intel_hex(hex_path.read_text())
    if sidecar is None:
        candidate = hex_path.with_suffix(".json")
        sidecar = candidate if candidate.exists() else None
    if sidecar is not None:
        image = apply_sidecar(image, json.loads(Path(sidecar).read_text()))
    return image.with_meta(source=str(hex_path))


def save_firmware(image: FirmwareImage, hex_path: str | Path) -> Path:
    hex_path = Path(hex_path)
    hex_path.write_text(dump_intel_hex(image))
    sidecar = hex_path.with_suffix(".json")
    sidecar.write_text(json.dumps(sidecar_json(image), indent=2) + "\n")
    return sidecar
