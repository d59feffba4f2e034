from __future__ import annotations

import pytest

from avrrop.campaign import (
    AttackPlan,
    WormConfig,
    evaluate_countermeasure,
    report_json,
    run_full_attack,
    simulate_worm,
)
from avrrop.emulator import BootOptions, boot, inspect
from avrrop.fakestack import PostAction
from avrrop.firmware import PAGE_WORDS


@pytest.fixture(scope="module")
def plan(demo_image, demo_catalog):
    return AttackPlan.for_image(demo_image, catalog=demo_catalog)


def _node(image, cleanup=False):
    return boot(image, BootOptions(layout=image.layout, cleanup_enabled=cleanup))


def test_full_attack(demo_image, malware64, plan):
    m = _node(demo_image)
    r = run_full_attack(m, malware64, plan=plan)
    assert r.succeeded, r.detail
    assert r.packets_sent == 16 + 64 + 1
    assert r.reboots_observed == 80
    assert r.schedule_verified and r.flash_verified and r.malware_executed and r.sentinel_set
    page = inspect(m, "flash", 0x8000, 0x8000 + PAGE_WORDS)
    assert page == malware64 + bytes(256 - 64)


def test_attack_is_repeatable_on_same_node(demo_image, malware64, plan):
    m = _node(demo_image)
    assert run_full_attack(m, malware64, plan=plan).succeeded
    assert run_full_attack(m, malware64, plan=plan).succeeded


def test_reboot_post_action(demo_image, malware64, plan):
    r = run_full_attack(_node(demo_image), malware64, post_action=PostAction.REBOOT, plan=plan)
    assert r.succeeded and r.flash_verified and not r.malware_executed


def test_destination_in_bootloader_is_refused(demo_image, malware64, plan):
    m = _node(demo_image)
    before = inspect(m, "flash", 0xF800, 0xF800 + PAGE_WORDS)
    r = run_full_attack(m, malware64, dest_m=0xF800, plan=plan)
    assert str(r.failure_stage) == "Flash"
    assert inspect(m, "flash", 0xF800, 0xF800 + PAGE_WORDS) == before


def test_cleanup_stops_multi_packet_attack(demo_image, malware64, plan):
    on = evaluate_countermeasure(demo_image, malware64, cleanup_enabled=True, plan=plan)
    off = evaluate_countermeasure(demo_image, malware64, cleanup_enabled=False, plan=plan)
    assert str(on.failure_stage) == "InjectionByte(1)"
    assert not on.flash_verified
    assert off.succeeded


def test_oversized_packet_defeats_cleanup(demo_image, malware64, plan):
    r = evaluate_countermeasure(demo_image, malware64, cleanup_enabled=True, oversized=True, plan=plan)
    assert r.succeeded and r.packets_sent == 1 and r.reboots_observed == 0
    assert r.mode == "oversized"


def test_lost_packet_aborts(demo_image, malware64, plan):
    calls = iter([False, False, True])
    r = run_full_attack(_node(demo_image), malware64, plan=plan, lose=lambda: next(calls))
    assert r.packet_lost and str(r.failure_stage) == "InjectionByte(2)"


def test_report_json_round_trip(demo_image, malware64, plan):
    import json

    obj = json.loads(report_json(run_full_attack(_node(demo_image), malware64, plan=plan)))
    assert obj["succeeded"] is True and obj["failure_stage"] is None


def test_worm_line_of_ten():
    r = simulate_worm(WormConfig(node_count=10, topology="line"))
    assert r.rounds_to_full_infection == 9
    assert r.infected_per_round == list(range(1, 11))
    assert r.incomplete_image_events == 0
    assert r.packets_transmitted == 9 * 81


def test_worm_single_node():
    r = simulate_worm(WormConfig(node_count=1))
    assert r.rounds_to_full_infection == 0 and r.infected_per_round == [1]


def test_worm_ring_from_middle():
    r = simulate_worm(WormConfig(node_count=6, topology="ring", initial_infected=2))
    assert r.rounds_to_full_infection == 3


def test_worm_lossy_is_seeded_and_monotone():
    cfg = WormConfig(node_count=5, topology="line", loss_probability=0.005, rng_seed=4, max_rounds=8)
    a, b = simulate_worm(cfg), simulate_worm(cfg)
    assert a.json() == b.json()
    assert all(x <= y for x, y in zip(a.infected_per_round, a.infected_per_round[1:]))
    assert a.incomplete_image_events + a.infected_per_round[-1] >= 1


def test_worm_csv():
    csv_text = simulate_worm(WormConfig(node_count=3)).to_csv()
    assert csv_text.splitlines() == ["round,infected_count", "0,1", "1,2", "2,3"]


@pytest.mark.parametrize(
    "kwargs",
    [{"node_count": 0}, {"loss_probability": 1.0}, {"initial_infected": 10}, {"topology": "star"}, {"max_rounds": -1}],
)
def test_worm_config_validation(kwargs):
    with pytest.raises(ValueError):
        WormConfig(**kwargs)
