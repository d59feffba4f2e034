from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avrrop.errors import MissingTrailingWord, OperandOutOfRange, RangeOutOfBounds, UnsupportedMnemonic
from avrrop.firmware import FirmwareImage
from avrrop.isa import (
    Instruction,
    Op,
    assemble,
    decode_instruction,
    decode_words,
    disassemble_range,
    encode,
    format_listing,
    needs_trailing_word,
    parse_instruction,
)
from oracles import DATASHEET


@pytest.mark.parametrize("text,words", DATASHEET, ids=[t for t, _ in DATASHEET])
def test_encodings_match_manual(text, words):
    assert assemble([text]) == words
    insn = decode_words(words)[0]
    assert insn.text() == text
    assert insn.width == len(words)


def test_fixed_words():
    assert decode_instruction(0x9508).op is Op.RET
    assert decode_instruction(0x9518).op is Op.RETI
    assert decode_instruction(0x95E8).op is Op.SPM
    assert decode_instruction(0x01FC) == Instruction(Op.MOVW, (30, 24))


def test_two_word_needs_trailing():
    assert needs_trailing_word(0x940C)
    with pytest.raises(MissingTrailingWord):
        decode_instruction(0x940C)
    with pytest.raises(MissingTrailingWord):
        decode_words([0x9380])
    assert decode_instruction(0x940C, 0x0046) == Instruction(Op.JMP, (0x46,))


def test_unknown_words_decode_to_unknown():
    insn = decode_instruction(0xFFFF)
    assert insn.op is Op.UNKNOWN and insn.text() == ".word 0xffff"
    # ld through Y is outside the subset
    assert decode_instruction(0x8188).op is Op.UNKNOWN


def test_every_known_word_reencodes_exactly():
    for w in range(0x10000):
        trailing = 0x1234 if needs_trailing_word(w) else None
        insn = decode_instruction(w, trailing)
        if insn.op is Op.UNKNOWN:
            continue
        expect = [w] if trailing is None else [w, trailing]
        assert encode(insn) == expect, (hex(w), insn)


regs = st.integers(0, 31)
hi_regs = st.integers(16, 31)
byte = st.integers(0, 255)

instructions = st.one_of(
    st.builds(lambda r: Instruction(Op.POP, (r,)), regs),
    st.builds(lambda r: Instruction(Op.PUSH, (r,)), regs),
    st.builds(lambda d, r: Instruction(Op.MOVW, (2 * d, 2 * r)), st.integers(0, 15), st.integers(0, 15)),
    st.builds(lambda d, r: Instruction(Op.MOV, (d, r)), regs, regs),
    st.builds(lambda d, r: Instruction(Op.ADD, (d, r)), regs, regs),
    st.builds(lambda d, k: Instruction(Op.LDI, (d, k)), hi_regs, byte),
    st.builds(lambda d, k: Instruction(Op.SUBI, (d, k)), hi_regs, byte),
    st.builds(lambda r, a: Instruction(Op.OUT, (a, r)), regs, st.integers(0, 63)),
    st.builds(lambda r, a: Instruction(Op.IN, (r, a)), regs, st.integers(0, 63)),
    st.builds(lambda q, r: Instruction(Op.STD, (q, r)), st.integers(1, 63), regs),
    st.builds(lambda r, q: Instruction(Op.LDD, (r, q)), regs, st.integers(1, 63)),
    st.builds(lambda r: Instruction(Op.ST, (r,)), regs),
    st.builds(lambda k, r: Instruction(Op.STS, (k, r)), st.integers(0, 0xFFFF), regs),
    st.builds(lambda k: Instruction(Op.JMP, (k,)), st.integers(0, 0x3FFFFF)),
    st.builds(lambda k: Instruction(Op.CALL, (k,)), st.integers(0, 0x3FFFFF)),
    st.builds(lambda k: Instruction(Op.RJMP, (k,)), st.integers(-2048, 2047)),
    st.builds(lambda k: Instruction(Op.BRNE, (k,)), st.integers(-64, 63)),
    st.builds(lambda d, k: Instruction(Op.ADIW, (d, k)), st.sampled_from([24, 26, 28, 30]), st.integers(0, 63)),
    st.builds(lambda a, b: Instruction(Op.SBI, (a, b)), st.integers(0, 31), st.integers(0, 7)),
    st.sampled_from([Instruction(op) for op in (Op.RET, Op.RETI, Op.SPM, Op.NOP, Op.CLI, Op.IJMP)]),
)


@given(instructions)
@settings(max_examples=400, deadline=None)
def test_roundtrip_encode_decode(insn):
    words = encode(insn)
    assert decode_words(words) == [insn]


@given(instructions)
@settings(max_examples=300, deadline=None)
def test_roundtrip_text(insn):
    # the text form parses back to the same instruction (relative forms at pc 0)
    assert parse_instruction(insn.text(), 0) == insn


def test_relative_text_form_and_labels():
    words = assemble(["top:", "nop", "brne top", "rjmp .-2"], origin=0x10)
    assert decode_words(words)[1] == Instruction(Op.BRNE, (-2,))
    assert format_listing([(0x11, decode_words(words)[1])]) == "11: brne .-4"


def test_operand_errors():
    with pytest.raises(OperandOutOfRange):
        assemble(["ldi r3, 0x10"])
    with pytest.raises(OperandOutOfRange):
        assemble(["sbi 0x40, 1"])
    with pytest.raises(UnsupportedMnemonic):
        assemble(["frobnicate r1"])


def test_disassemble_range_straddling_two_word():
    img = FirmwareImage((0x0000, 0x940C, 0x0046, 0x9508))
    listing = disassemble_range(img, 0, 2)
    assert [i.op for _, i in listing] == [Op.NOP, Op.UNKNOWN]
    assert [a for a, _ in disassemble_range(img, 0, 4)] == [0, 1, 3]
    with pytest.raises(RangeOutOfBounds):
        disassemble_range(img, 0, 5)


def test_listing_format():
    img = FirmwareImage(tuple(assemble(["pop r24", "ret"])))
    assert format_listing(disassemble_range(img, 0, 2)) == "0: pop r24\n1: ret"
