"""End-to-end machine runs: boot, exchanges, injection, tracing."""

import json

import pytest

from sallyport.hart import RunOutcome
from sallyport.monitor import (
    Machine,
    Possession,
    system_layout,
    trace_to_ndjson,
    write_trace,
)

CANARY = 0x5151


@pytest.fixture(scope="module")
def nominal():
    m = Machine(system_layout(enclave_count=2),
                enclave_variants=("ocall", "compute"))
    run = m.run()
    return m, run


def test_nominal_boot_is_admitted(nominal):
    m, run = nominal
    assert not run.refused
    assert m.scan_report.accepted


def test_nominal_run_parks(nominal):
    _, run = nominal
    assert run.outcome is RunOutcome.STOPPED


def test_nominal_results(nominal):
    m, _ = nominal
    assert m.read_result("service") == 0xC          # 5 + 7
    assert m.read_result("service_canary") == CANARY
    assert m.read_result("app") == 0x54             # (33 + 9) * 2
    assert m.read_result("create") == 0
    assert m.read_result("enter") == 0xC            # enclave left via ocall
    assert m.read_result("ocall_payload") == 0x42
    assert m.read_result("ocall_final") == 0x22     # 0x21 + 1 on resume
    assert m.read_result("delete") == 0
    assert m.read_result("canary") == CANARY


def test_nominal_visits_every_view(nominal):
    m, run = nominal
    # boot, principal, firmware, and one per entered enclave at minimum
    assert len(run.pmp_states) >= 4
    digests = {st.digest() for st in run.pmp_states.values()}
    assert digests == set(run.pmp_states)


def test_machine_mode_stays_in_monitor_firmware_and_transition(nominal):
    m, run = nominal
    lay = m.layout
    for ev in run.events_of("Exec"):
        if ev.mode == "M":
            ok = (lay.p_code.contains(ev.pc) or lay.f_code.contains(ev.pc)
                  or lay.transition.contains(ev.pc))
            assert ok, f"M-mode execution at {ev.pc:#x}"


def test_su_mode_never_executes_privileged_regions(nominal):
    m, run = nominal
    lay = m.layout
    for ev in run.events_of("Exec"):
        if ev.mode == "SU":
            assert not lay.p_code.contains(ev.pc)
            assert not lay.f_code.contains(ev.pc)
            assert not lay.transition.contains(ev.pc)


def test_enclave_snoop_is_torn_down():
    m = Machine(system_layout(enclave_count=2), os_variant="enclave_round",
                enclave_variants=("snoop_sibling", "compute"))
    run = m.run()
    assert run.outcome is RunOutcome.STOPPED
    assert m.read_result("enter") == 0xF            # faulted, destroyed
    assert m.read_result("canary") == CANARY


@pytest.mark.parametrize("variant", ["snoop_os", "snoop_p_data"])
def test_enclave_reads_outside_its_view_fault(variant):
    m = Machine(system_layout(enclave_count=1), os_variant="enclave_round",
                enclave_variants=(variant,))
    run = m.run()
    assert run.outcome is RunOutcome.STOPPED
    assert m.read_result("enter") == 0xF
    assert m.read_result("canary") == CANARY


def test_enclave_timer_preemption_marks_timeout():
    dry = Machine(system_layout(enclave_count=1), os_variant="enclave_round",
                  enclave_variants=("ocall",))
    r = dry.run()
    enc = dry.layout.enclaves[0]
    cycle = next(ev.cycle for ev in r.events_of("Exec")
                 if enc.private.contains(ev.pc))
    m = Machine(system_layout(enclave_count=1), os_variant="enclave_round",
                enclave_variants=("ocall",))
    run = m.run(timer_at=cycle + 2)
    assert run.outcome is RunOutcome.STOPPED
    assert m.read_result("enter") == 0xE
    assert m.read_result("canary") == CANARY


FIRMWARE_PROBES = {
    "probe_read_p_data": 5, "probe_write_p_data": 7, "probe_read_p_code": 5,
    "probe_write_p_code": 7, "probe_exec_p_code": 1,
    "probe_exec_transition": 1, "probe_read_os": 5, "probe_write_os": 7,
    "probe_read_enclave": 5, "probe_write_own_code": 7,
    "probe_exec_own_data": 1,
}


@pytest.mark.parametrize("variant,cause", FIRMWARE_PROBES.items())
def test_firmware_probe_is_contained(variant, cause):
    m = Machine(system_layout(enclave_count=1), f_variant=variant,
                os_variant="service_only", enclave_variants=("compute",))
    run = m.run()
    assert run.outcome is RunOutcome.STOPPED
    assert m.read_result("service_canary") == CANARY
    # the probe trapped inside firmware, to firmware's own handler
    f_traps = [ev for ev in run.events_of("Trap")
               if not ev.data["interrupt"]
               and ev.data["handler"] == m.symbols["f_handler"]]
    assert f_traps, "expected the probe to fault"
    assert f_traps[0].data["cause"] == cause


def test_iago_result_is_clamped():
    m = Machine(system_layout(), f_variant="iago", os_variant="service_only")
    run = m.run()
    assert run.outcome is RunOutcome.STOPPED
    assert m.read_result("service") == 0x78         # low octet of the lie
    assert m.read_result("service_canary") == CANARY


def test_forged_resume_is_parried():
    m = Machine(system_layout(), f_variant="forged_resume",
                os_variant="service_only")
    run = m.run()
    assert run.outcome is RunOutcome.STOPPED
    assert m.read_result("service") == 0x99
    assert m.read_result("service_canary") == CANARY


OS_PROBES = {
    "probe_pmp_write": 2,       # illegal instruction
    "probe_mtvec_write": 2,
    "probe_jump_to_f": 1,       # fetch denied
    "probe_read_p_data": 5,     # load denied
    "probe_read_f_data": 5,
}


@pytest.mark.parametrize("variant,cause", OS_PROBES.items())
def test_os_probe_faults_and_is_skipped(variant, cause):
    m = Machine(system_layout(), os_variant=variant)
    run = m.run()
    assert run.outcome is RunOutcome.STOPPED
    assert m.read_result("probe") == 0x51
    faults = [ev.data["cause"] for ev in run.events_of("Trap")
              if not ev.data["interrupt"] and ev.data["cause"] not in (9, 11)]
    assert faults == [cause]


# --- boot gate ----------------------------------------------------------------


@pytest.mark.parametrize("variant", ["gadget_mtvec", "gadget_pmp_carrier"])
def test_gadget_firmware_is_refused_at_boot(variant):
    m = Machine(system_layout(), f_variant=variant)
    assert not m.boot_allowed
    run = m.run()
    assert run.refused
    assert run.steps == 0
    assert run.final is None
    assert m.scan_report.findings


def test_bypassed_scan_gadget_locks_the_machine_out():
    m = Machine(system_layout(), f_variant="gadget_pmp_carrier",
                os_variant="service_only", skip_scan=True)
    gadget = m.symbols["gadget_misaligned"]
    run = m.run(possession=Possession(
        pc=gadget, regs={"t0": 0}, when_exec_at=m.symbols["f_serve"]))
    assert run.possession_cycle is not None
    assert run.outcome is RunOutcome.STALL
    marks = run.events_of("AdversaryPossession")
    assert len(marks) == 1
    assert marks[0].data["target_pc"] == gadget


def test_possession_without_gadget_stays_confined():
    m = Machine(system_layout(), f_variant="benign", os_variant="service_only")
    run = m.run(possession=Possession(
        pc=m.symbols["f_entry"], regs={"a0": 2, "a1": 1, "a2": 1},
        when_exec_at=m.symbols["f_serve"]))
    assert run.possession_cycle is not None
    assert run.outcome in (RunOutcome.STOPPED, RunOutcome.STALL)
    # whatever happened, it happened inside firmware's view
    lay = m.layout
    for ev in run.events_of("MemAccess"):
        if ev.data["allowed"] and ev.mode == "M" and lay.f_code.contains(ev.pc):
            assert not lay.p_data.contains(ev.data["addr"])


# --- timer race ---------------------------------------------------------------


def transition_grant_cycle(vulnerable: bool) -> int:
    m = Machine(system_layout(), os_variant="service_only",
                vulnerable_transition=vulnerable)
    r = m.run()
    lay = m.layout
    writes = [ev for ev in r.events_of("CsrWrite")
              if ev.data["csr"] == "pmpcfg0" and lay.transition.contains(ev.pc)]
    return writes[0].cycle


def test_timer_race_stalls_the_vulnerable_ordering():
    fire = transition_grant_cycle(vulnerable=True) + 1
    m = Machine(system_layout(), os_variant="service_only",
                vulnerable_transition=True)
    run = m.run(timer_at=fire)
    assert run.outcome is RunOutcome.STALL
    assert run.final.cycle - fire <= 50
    taken = [ev for ev in run.events_of("Trap") if ev.data["interrupt"]]
    assert taken[0].data["handler"] == m.symbols["f_handler"]


def test_timer_race_safe_ordering_defers_the_interrupt():
    fire = transition_grant_cycle(vulnerable=False) + 1
    m = Machine(system_layout(), os_variant="service_only",
                vulnerable_transition=False)
    run = m.run(timer_at=fire)
    assert run.outcome is RunOutcome.STOPPED
    assert m.read_result("service") == 0xC
    taken = [ev for ev in run.events_of("Trap") if ev.data["interrupt"]]
    assert taken, "the pending timer must still fire eventually"
    assert all(ev.data["handler"] == m.symbols["p_handler"] for ev in taken)


def test_vulnerable_ordering_without_contention_behaves():
    m = Machine(system_layout(), os_variant="service_only",
                vulnerable_transition=True)
    run = m.run()
    assert run.outcome is RunOutcome.STOPPED
    assert m.read_result("service") == 0xC


# --- state capture ------------------------------------------------------------


def test_checkpoint_restore_replays_identically():
    """Hart snapshot plus memory journal give deterministic replay."""
    m = Machine(system_layout(), os_variant="service_only")
    first = m.run(stop=lambda st: st.pc == m.symbols["f_serve"])
    assert first.outcome is RunOutcome.STOPPED
    snap = m.checkpoint()
    m.mem.begin_journal()
    a = m.run()
    pc_a, cycle_a = a.final.pc, a.final.cycle
    svc_a = m.read_result("service")
    m.mem.rollback()
    m.restore(snap)
    assert m.stepper.state.pc == m.symbols["f_serve"]
    m.mem.begin_journal()
    b = m.run()
    assert (b.final.pc, b.final.cycle) == (pc_a, cycle_a)
    assert m.read_result("service") == svc_a


def test_restore_without_journal_trips_the_resume_guard():
    """Replaying from a hart snapshot alone leaves the exchange flag spent
    in memory, so the monitor routes the stale completion to its park loop
    instead of resuming anyone. This is the forged-resume defense seen from
    the replay side."""
    m = Machine(system_layout(), os_variant="service_only")
    m.run(stop=lambda st: st.pc == m.symbols["f_serve"])
    snap = m.checkpoint()
    a = m.run()
    m.restore(snap)
    b = m.run()
    assert b.outcome is RunOutcome.STOPPED
    assert b.final.cycle < a.final.cycle


def test_journal_rollback_undoes_memory_writes():
    m = Machine(system_layout(), os_variant="service_only")
    m.run(stop=lambda st: st.pc == m.symbols["f_serve"])
    snap = m.checkpoint()
    before = m.read_result("service")
    assert before != 0xC
    m.mem.begin_journal()
    m.run()
    assert m.read_result("service") == 0xC
    m.mem.rollback()
    m.restore(snap)
    assert m.read_result("service") == before
    m.mem.begin_journal()
    m.run()
    assert m.read_result("service") == 0xC


def test_trace_exec_off_still_detects_the_stall():
    fire = transition_grant_cycle(vulnerable=True) + 1
    m = Machine(system_layout(), os_variant="service_only",
                vulnerable_transition=True, trace_exec=False)
    run = m.run(timer_at=fire)
    assert run.outcome is RunOutcome.STALL
    assert not run.events_of("Exec")


# --- trace export -------------------------------------------------------------


def test_trace_ndjson_shape(tmp_path, nominal):
    _, run = nominal
    text = trace_to_ndjson(run)
    lines = text.splitlines()
    records = [json.loads(line) for line in lines]
    kinds = {rec["kind"] for rec in records}
    assert {"PmpSnapshot", "Exec", "MemAccess", "CsrWrite", "Trap",
            "ModeSwitch"} <= kinds
    snaps = [rec for rec in records if rec["kind"] == "PmpSnapshot"]
    assert len(snaps) == len(run.pmp_states)
    assert len({s["pmp_hash"] for s in snaps}) == len(snaps)
    # a view's snapshot precedes any event that references it
    seen = set()
    for rec in records:
        if rec["kind"] == "PmpSnapshot":
            seen.add(rec["pmp_hash"])
        elif "pmp_hash" in rec:
            assert rec["pmp_hash"] in seen

    out = tmp_path / "trace.ndjson"
    write_trace(run, out)
    assert out.read_text() == text


def test_read_results_window(nominal):
    m, _ = nominal
    values = m.read_results(len(m.images.os_slots))
    assert values[m.images.os_slots["service"]] == 0xC
    assert values[m.images.os_slots["canary"]] == CANARY
