from __future__ import annotations

import json
from importlib import resources

import jsonschema
import pytest

from avrrop.cli import main


def _schema(name: str) -> dict:
    return json.loads(resources.files("avrrop").joinpath(f"schemas/{name}.schema.json").read_text())


def _validate(obj, name: str) -> None:
    jsonschema.validate(obj, _schema(name))


@pytest.fixture(scope="module")
def fx(tmp_path_factory):
    d = tmp_path_factory.mktemp("fx")
    assert main(["fixture", str(d)]) == 0
    return d


def _run(capsys, argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_fixture_files(fx):
    assert {p.name for p in fx.iterdir()} >= {"demo.hex", "demo.json", "null.hex", "null.json", "mal.bin"}


def test_disasm(capsys, fx):
    code, out, _ = _run(capsys, ["disasm", "--image", fx / "demo.hex", "--start", 0x2B58, "--end", 0x2B5A])
    assert code == 0
    assert out.splitlines() == ["2b58: pop r24", "2b59: pop r25"]


def test_scan_json_schema(capsys, fx):
    code, out, _ = _run(capsys, ["scan", "--image", fx / "demo.hex", "--json"])
    assert code == 0
    obj = json.loads(out)
    _validate(obj, "catalog")
    assert any(g["entry"] == "0x2b58" for g in obj["gadgets"])


def test_scan_table(capsys, fx, tmp_path):
    csv_path, png = tmp_path / "t.csv", tmp_path / "t.png"
    code, out, _ = _run(
        capsys, ["scan", "--image", fx / "demo.hex", "--image", fx / "null.hex", "--table", "--json",
                 "--csv", csv_path, "--plot", png]
    )
    assert code == 0
    rows = json.loads(out)
    _validate(rows, "app_table")
    assert [r["payload_length"] for r in rows] == [19, "none"]
    assert csv_path.read_text().splitlines()[0] == "application,code_size_kb,payload_length"
    assert png.stat().st_size > 0


def test_chain_write_byte(capsys, fx, tmp_path):
    binf = tmp_path / "p.bin"
    code, out, _ = _run(
        capsys, ["chain", "--image", fx / "demo.hex", "--target", 0x400, "--value", 0x5A, "--json", "--bin", binf]
    )
    assert code == 0
    obj = json.loads(out)
    _validate(obj, "chain")
    assert binf.read_bytes().hex() == "00010203582b0004005a00000085013a070000"


def test_chain_all_and_reprogram(capsys, fx):
    code, out, _ = _run(capsys, ["chain", "--image", fx / "demo.hex", "--all", "--json"])
    assert code == 0 and len(json.loads(out)) > 1
    code, out, _ = _run(capsys, ["chain", "--image", fx / "demo.hex", "--goal", "reprogram", "--json"])
    assert code == 0
    _validate(json.loads(out), "chain")


def test_chain_none_is_domain_error(capsys, fx):
    code, out, err = _run(capsys, ["chain", "--image", fx / "null.hex", "--json"])
    assert code == 1
    obj = json.loads(out)
    _validate(obj, "error")
    assert obj["error"] == "NoChainFound"
    code, _, _ = _run(capsys, ["chain", "--image", fx / "demo.hex", "--max-payload", 18])
    assert code == 1


def test_fakestack(capsys, fx):
    code, out, _ = _run(capsys, ["fakestack", "--image", fx / "demo.hex", "--malware", fx / "mal.bin", "--json"])
    assert code == 0
    obj = json.loads(out)
    _validate(obj, "fakestack")
    assert len(obj["schedule"]["writes"]) == 16 + 64
    code, out, _ = _run(capsys, ["fakestack", "--malware", fx / "mal.bin", "--gadget3", 0xFB4D])
    assert code == 0 and "retAddr" in out


def test_fakestack_region_collision(capsys, fx):
    code, _, err = _run(
        capsys, ["fakestack", "--image", fx / "demo.hex", "--malware", fx / "mal.bin", "--fsp", 0x200]
    )
    assert code == 1 and "RegionCollision" in err


def test_emulate_payload(capsys, fx, tmp_path):
    trace = tmp_path / "trace.txt"
    payload = "00010203582b0004005a00000085013a070000"
    code, out, _ = _run(
        capsys, ["emulate", "--image", fx / "demo.hex", "--payload", payload, "--dump", 0x400, 0x401,
                 "--trace", trace, "--json"]
    )
    assert code == 0
    obj = json.loads(out)
    assert obj["sram"] == "5a" and obj["outcome"]["kind"] == "SoftReboot"
    assert "pop r24" in trace.read_text()


def test_emulate_oversized_packet_is_domain_error(capsys, fx):
    code, _, err = _run(capsys, ["emulate", "--image", fx / "demo.hex", "--payload", "00" * 29])
    assert code == 1 and "PacketTooLarge" in err


def test_attack(capsys, fx):
    code, out, _ = _run(capsys, ["attack", "--image", fx / "demo.hex", "--malware", fx / "mal.bin", "--json"])
    assert code == 0
    obj = json.loads(out)
    _validate(obj, "attack_report")
    assert obj["packets_sent"] == 81 and obj["malware_executed"]


def test_attack_with_cleanup_fails(capsys, fx):
    code, out, _ = _run(
        capsys, ["attack", "--image", fx / "demo.hex", "--malware", fx / "mal.bin", "--cleanup", "--json"]
    )
    assert code == 1
    obj = json.loads(out)
    _validate(obj, "attack_report")
    assert obj["failure_stage"] == "InjectionByte(1)"
    code, _, _ = _run(
        capsys, ["attack", "--image", fx / "demo.hex", "--malware", fx / "mal.bin", "--cleanup", "--oversized"]
    )
    assert code == 0


def test_wormsim(capsys, tmp_path):
    csv_path = tmp_path / "w.csv"
    code, out, _ = _run(capsys, ["wormsim", "--nodes", 4, "--json", "--csv", csv_path, "--out", tmp_path / "r.json"])
    assert code == 0 and out == ""
    obj = json.loads((tmp_path / "r.json").read_text())
    _validate(obj, "propagation")
    assert obj["rounds_to_full_infection"] == 3
    assert csv_path.read_text().startswith("round,infected_count\n")


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["bogus"],
        ["scan"],
        ["chain", "--image", "/nonexistent.hex"],
        ["wormsim", "--nodes", "0"],
        ["wormsim", "--loss", "1.5"],
        ["chain", "--image", "{demo}", "--target", "notanint"],
    ],
)
def test_usage_errors_exit_2(capsys, fx, argv):
    argv = [a.replace("{demo}", str(fx / "demo.hex")) for a in argv]
    code, _, _ = _run(capsys, argv)
    assert code == 2


def test_corrupt_hex_is_usage_error(capsys, tmp_path):
    bad = tmp_path / "bad.hex"
    bad.write_text(":02000000089562\n:00000001FF\n")
    code, _, err = _run(capsys, ["disasm", "--image", bad])
    assert code == 2 and "ChecksumMismatch" in err


def test_help_exits_0(capsys):
    assert _run(capsys, ["--help"])[0] == 0
