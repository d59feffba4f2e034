from __future__ import annotations

import random

import pytest

from avrrop.emulator import BootOptions, boot, step
from avrrop.firmware import FirmwareImage
from avrrop.gadgets import IO_SPH, IO_SPL, ScanConfig, Sym, init, make_gadget, scan_gadgets
from avrrop.isa import Op, assemble, decode_words
from oracles import brute_force_gadgets, random_image


def _as_set(catalog):
    return {(g.entry, g.body) for g in catalog}


@pytest.mark.parametrize("seed", range(8))
def test_scan_equals_brute_force(seed):
    rng = random.Random(seed)
    img = random_image(rng, rng.randrange(64, 1024))
    for max_len in (1, 4, 16):
        assert _as_set(scan_gadgets(img, ScanConfig(max_len=max_len))) == brute_force_gadgets(img, max_len)


def test_demo_catalog_contains_injection_gadgets(demo_catalog):
    g1 = demo_catalog.at(0x2B58)
    assert g1 is not None and g1.terminator is Op.RETI and g1.length == 9
    assert [r for r, _ in g1.effects.pops] == [24, 25, 19, 18, 0, 0, 1]
    assert g1.stack_consumed == 9
    g2 = demo_catalog.at(0x0185)
    assert g2.effects.final[30] == init(24) and g2.effects.final[31] == init(25)
    g3 = demo_catalog.at(0x073A)
    (store,) = g3.effects.stores
    assert (store.base, store.disp, store.data_reg) == ("Z", 0, 18)


def test_pivot_summary(demo_catalog):
    g = demo_catalog.at(0xFBA9)
    e = g.effects
    assert {IO_SPL, IO_SPH} <= e.sp_writes
    assert e.pivot_after_pops == 0
    assert e.sp_source(IO_SPL) == init(28) and e.sp_source(IO_SPH) == init(29)


def test_spm_gadget_in_bootloader(demo_catalog):
    spm = [g for g in demo_catalog if g.effects and g.effects.spm_present]
    assert spm and all(g.entry >= demo_catalog.bootloader_start for g in spm)


def test_gadget_suffixes_are_all_entries(demo_catalog):
    entries = set(demo_catalog.entries())
    assert {0x2B58 + i for i in range(9)} <= entries


def test_push_is_unmodeled():
    g = make_gadget(0, decode_words(assemble(["push r0", "ret"])))
    assert g.effects is None and "push" in g.unmodeled


def test_max_len_limits_length():
    img = FirmwareImage(tuple(assemble(["pop r0"] * 20 + ["ret"])))
    assert len(scan_gadgets(img, ScanConfig(max_len=5))) == 5
    assert len(scan_gadgets(img, ScanConfig(max_len=32))) == 21


def test_section_filter(demo_image):
    app = scan_gadgets(demo_image, ScanConfig(section="application"))
    boot_ = scan_gadgets(demo_image, ScanConfig(section="bootloader"))
    assert all(g.entry < 0xF800 for g in app)
    assert all(g.entry >= 0xF800 for g in boot_)
    assert len(app) + len(boot_) == len(scan_gadgets(demo_image))


def test_catalog_json(demo_catalog):
    obj = demo_catalog.to_json()
    assert obj["count"] == len(demo_catalog)
    first = next(g for g in obj["gadgets"] if g["entry"] == "0x2b58")
    assert first["disassembly"][0] == "2b58: pop r24"


def _value(sym: Sym, regs0: bytes, stack: bytes) -> int | None:
    if sym.kind == "init":
        return regs0[sym.value]
    if sym.kind == "slot":
        return stack[sym.value]
    if sym.kind == "const":
        return sym.value
    return None


def test_effect_summaries_are_sound(demo_image, demo_catalog):
    """Run every modeled gadget from random states and compare with its summary."""
    rng = random.Random(3)
    checked = 0
    for g in demo_catalog.modeled():
        e = g.effects
        if e.sp_writes or e.spm_present or len(e.stores) > 1:
            continue
        for _ in range(5):
            m = boot(demo_image, BootOptions(layout=demo_image.layout))
            regs0 = bytearray(rng.randrange(256) for _ in range(32))
            z = rng.randrange(0x0300, 0x0E00)
            regs0[30], regs0[31] = z & 0xFF, z >> 8
            m.sram[0:32] = regs0
            stack = bytes(rng.randrange(256) for _ in range(40))
            m.sram[0x1000 : 0x1000 + len(stack)] = stack
            m.sp = 0x0FFF
            m.pc = g.entry
            for _ in range(g.length - 1):
                assert step(m) is None
            for r in range(32):
                want = _value(e.final[r], bytes(regs0), stack)
                if want is not None:
                    assert m.sram[r] == want, (hex(g.entry), r)
            for s in e.stores:
                addr = (_value(s.addr_hi, bytes(regs0), stack) << 8 | _value(s.addr_lo, bytes(regs0), stack)) + s.disp
                assert m.sram[addr] == _value(s.data, bytes(regs0), stack)
            assert m.sp == 0x0FFF + e.pop_count
        checked += 1
    assert checked > 40
