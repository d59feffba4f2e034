from __future__ import annotations

import io
import json
import random

import pytest
from intelhex import IntelHex

from avrrop.errors import AddressOverflow, ChecksumMismatch, MalformedRecord
from avrrop.firmware import (
    FirmwareImage,
    HarnessInfo,
    MemoryLayout,
    dump_intel_hex,
    image_from_blocks,
    load_firmware,
    load_intel_hex,
    read_program_word,
    save_firmware,
)
from avrrop.fixtures import demo_firmware


def _oracle_words(text: str) -> list[int]:
    ih = IntelHex(io.StringIO(text))
    top = ih.maxaddr() + 1
    if top % 2:
        top += 1
    return [ih[2 * i] | (ih[2 * i + 1] << 8) for i in range(top // 2)]


def test_load_matches_intelhex_oracle():
    rng = random.Random(7)
    for _ in range(20):
        ih = IntelHex()
        for _ in range(rng.randint(1, 6)):
            base = rng.randrange(0, 0x1F000)
            for i in range(rng.randint(1, 300)):
                ih[base + i] = rng.randrange(256)
        buf = io.StringIO()
        ih.write_hex_file(buf)
        text = buf.getvalue()
        img = load_intel_hex(text)
        assert list(img.program) == _oracle_words(text)


def test_dump_is_readable_by_intelhex():
    img = demo_firmware()
    text = dump_intel_hex(img)
    assert _oracle_words(text) == list(img.program)
    assert load_intel_hex(text).program == img.program


def test_single_ret_record():
    rec = ":02000000089561"
    # checksum 0x61 = two's complement of 0x02 + 0x08 + 0x95, as a reference tool computes it
    assert _oracle_words(rec + "\n:00000001FF\n") == [0x9508]
    assert load_intel_hex(rec + "\n:00000001FF\n").program == (0x9508,)


def test_eof_only_is_empty():
    img = load_intel_hex(":00000001FF\n")
    assert img.program == ()
    assert read_program_word(img, 0) == 0xFFFF


def test_checksum_mismatch():
    with pytest.raises(ChecksumMismatch):
        load_intel_hex(":02000000089562\n:00000001FF\n")


def test_malformed_and_missing_eof():
    with pytest.raises(MalformedRecord):
        load_intel_hex("040000000895189516\n")
    with pytest.raises(MalformedRecord):
        load_intel_hex(":02000000089561AA\n:00000001FF\n")
    with pytest.raises(MalformedRecord):
        load_intel_hex(":02000000089561\n")


def test_address_beyond_flash():
    ih = IntelHex()
    ih[0x20000] = 1
    buf = io.StringIO()
    ih.write_hex_file(buf)
    with pytest.raises(AddressOverflow):
        load_intel_hex(buf.getvalue())


def test_unwritten_reads_erased():
    img = image_from_blocks([(4, [0x9508])])
    assert img.program[:5] == (0xFFFF,) * 4 + (0x9508,)
    assert read_program_word(img, 0x8000) == 0xFFFF
    with pytest.raises(AddressOverflow):
        read_program_word(img, 0x10000)


def test_bootloader_start_must_be_page_aligned():
    with pytest.raises(ValueError):
        FirmwareImage((), bootloader_start=0xF801)


def test_layout_validation():
    with pytest.raises(ValueError):
        MemoryLayout(data_section=(0x300, 0x200))
    lay = MemoryLayout(data_section=(0x100, 0x200), bss_section=(0x200, 0x300))
    assert lay.unused_region == (0x300, 0x0F00)
    assert MemoryLayout.from_json(lay.to_json()) == lay


def test_sidecar_roundtrip(tmp_path):
    img = demo_firmware()
    sidecar = save_firmware(img, tmp_path / "demo.hex")
    meta = json.loads(sidecar.read_text())
    assert meta["symbols"]["inj_gadget1"] == "0x2b58"
    back = load_firmware(tmp_path / "demo.hex")
    assert back.program == img.program
    assert back.symbols == img.symbols
    assert back.layout == img.layout
    assert back.harness == HarnessInfo(0x0500, 0x02C0, 0x1060)
    assert back.digest() == img.digest()


def test_app_code_bytes():
    img = image_from_blocks([(0, [0x9508] * 10), (0xF800, [0x9508])])
    assert img.app_code_bytes() == 20
