"""Front-end behavior: exit codes, output formats, config validation."""

import json

import pytest

from sallyport.cli import main
from sallyport.harness import actor_at
from sallyport.layout import build_layout
from sallyport.monitor import system_layout
from sallyport.program import generate_system


@pytest.fixture(scope="module")
def blobs(tmp_path_factory):
    root = tmp_path_factory.mktemp("blobs")
    layout = system_layout()
    benign = root / "benign.bin"
    benign.write_bytes(generate_system(layout).f_code)
    gadget = root / "gadget.bin"
    gadget.write_bytes(
        generate_system(layout, f_variant="gadget_pmp_carrier").f_code)
    return {"benign": str(benign), "gadget": str(gadget)}


def _config(tmp_path, **kwargs):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(kwargs))
    return str(path)


# --- scan ---------------------------------------------------------------------


def test_scan_accepts_benign_blob(blobs, capsys):
    assert main(["scan", blobs["benign"]]) == 0
    assert "accepted\tTrue" in capsys.readouterr().out


def test_scan_rejects_gadget_blob(blobs, capsys):
    assert main(["scan", blobs["gadget"]]) == 1
    out = capsys.readouterr().out
    assert "accepted\tFalse" in out
    assert "PMP_WRITE" in out


def test_scan_json_report(blobs, capsys):
    assert main(["scan", blobs["gadget"], "--format", "json"]) == 1
    report = json.loads(capsys.readouterr().out)
    assert report["accepted"] is False
    assert report["findings"]


def test_scan_missing_file_is_operational_error(capsys):
    assert main(["scan", "/nonexistent/blob.bin"]) == 2
    assert "error:" in capsys.readouterr().err


def test_scan_oversized_blob_is_operational_error(tmp_path, capsys):
    big = tmp_path / "big.bin"
    big.write_bytes(b"\x00" * 0x2000)
    assert main(["scan", str(big)]) == 2


# --- run ----------------------------------------------------------------------


def test_run_default_machine_stops_clean(capsys):
    assert main(["run"]) == 0
    out = capsys.readouterr().out
    assert "outcome\tstopped" in out
    assert "verdict\tclean" in out


def test_run_json_carries_results_and_layout(capsys):
    assert main(["run", "--format", "json"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["outcome"] == "stopped"
    assert payload["results"]["service"] == 0xC
    assert payload["config"]["layout"]["regions"]["p_code"]["base"] == 0x10000


def test_run_output_is_deterministic(capsys):
    assert main(["run", "--format", "json"]) == 0
    first = capsys.readouterr().out
    assert main(["run", "--format", "json"]) == 0
    assert capsys.readouterr().out == first


def test_run_trace_crosses_all_compartments(tmp_path, capsys):
    trace = tmp_path / "run.ndjson"
    assert main(["run", "--trace", str(trace)]) == 0
    layout = system_layout()
    actors = []
    for line in trace.read_text().splitlines():
        ev = json.loads(line)
        if ev["kind"] != "Exec":
            continue
        actor = actor_at(layout, ev["mode"], ev["pc"])
        if not actors or actors[-1] != actor:
            actors.append(actor)
    joined = ",".join(actors)
    assert "monitor,firmware,monitor,os" in joined
    assert json.loads(trace.read_text().splitlines()[0])["kind"] == "PmpSnapshot"


def test_run_scenario_by_name(capsys):
    assert main(["run", "--scenario", "firmware-timer-race"]) == 1
    out = capsys.readouterr().out
    assert "outcome\tstall" in out
    assert "verdict\tunrecoverable_stall" in out


def test_run_scenario_with_enclaves(capsys):
    assert main(["run", "--scenario", "enclave-snoop-os"]) == 0
    assert "verdict\tblocked" in capsys.readouterr().out


def test_run_unknown_scenario_is_operational_error(capsys):
    assert main(["run", "--scenario", "no-such-thing"]) == 2
    assert "unknown scenario" in capsys.readouterr().err


def test_run_rejects_unknown_config_keys(tmp_path, capsys):
    cfg = _config(tmp_path, bogus=1)
    assert main(["run", "--config", cfg]) == 2
    assert "unknown config keys" in capsys.readouterr().err


def test_run_rejects_malformed_json(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    assert main(["run", "--config", str(path)]) == 2


def test_run_rejects_misaligned_layout(tmp_path, capsys):
    cfg = _config(tmp_path, layout={"base": 0x10400})
    assert main(["run", "--config", cfg]) == 2
    assert "layout rejected" in capsys.readouterr().err


def test_run_external_firmware_blob(blobs, tmp_path, capsys):
    cfg = _config(tmp_path, firmware_blob=blobs["benign"],
                  os_variant="service_only")
    assert main(["run", "--config", cfg]) == 0
    assert "outcome\tstopped" in capsys.readouterr().out


def test_run_external_gadget_blob_is_refused(blobs, tmp_path, capsys):
    cfg = _config(tmp_path, firmware_blob=blobs["gadget"])
    assert main(["run", "--config", cfg, "--format", "json"]) == 1
    payload = json.loads(capsys.readouterr().out)
    assert payload["refused"] is True
    assert payload["mechanism"] == "scan_rejected"


def test_run_relocated_layout(tmp_path, capsys):
    cfg = _config(tmp_path, layout={"base": 0x40000},
                  os_variant="service_only")
    assert main(["run", "--config", cfg, "--format", "json"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["results"]["service"] == 0xC


# --- attack-suite ----------------------------------------------------------------


def test_suite_list_names_every_scenario(capsys):
    assert main(["attack-suite", "--list"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) >= 14
    assert any(line.startswith("firmware-timer-race\t") for line in lines)


def test_suite_single_scenario_json(capsys):
    assert main(["attack-suite", "--only", "s-mode-mtvec-write",
                 "--format", "json"]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert len(rows) == 1
    assert rows[0]["verdict"] == "blocked"
    assert rows[0]["mechanism"] == "illegal_instruction"
    assert rows[0]["matched"] is True


def test_suite_unknown_only_is_operational_error(capsys):
    assert main(["attack-suite", "--only", "nope"]) == 2


def test_suite_traces_and_figures(tmp_path, capsys):
    traces = tmp_path / "traces"
    figs = tmp_path / "figs"
    assert main(["attack-suite", "--only", "nominal-flows",
                 "--trace-dir", str(traces), "--figures", str(figs),
                 "--format", "json"]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert rows[0]["trace_path"].endswith("nominal-flows.ndjson")
    assert (traces / "nominal-flows.ndjson").stat().st_size > 0
    pngs = sorted(p.name for p in figs.iterdir())
    assert pngs == ["suite_summary.png", "view_matrices.png"]
    for p in figs.iterdir():
        assert p.read_bytes()[:4] == b"\x89PNG"


def test_suite_vulnerable_ordering_matches_expectations(capsys):
    assert main(["attack-suite", "--vulnerable-ordering",
                 "--only", "firmware-timer-race", "--format", "json"]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert rows[0]["verdict"] == "unrecoverable_stall"


def test_suite_rejects_machine_config_keys(tmp_path, capsys):
    cfg = _config(tmp_path, os_variant="spin")
    assert main(["attack-suite", "--config", cfg]) == 2
    assert "do not apply" in capsys.readouterr().err
