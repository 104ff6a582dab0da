"""Whole-package acceptance gates.

One claim per test, exercised end to end and at full scale, so a verbose
pytest run reports every guarantee on its own line. The per-module suites
exist to diagnose failures; these tests decide whether the package keeps
its promises: attack coverage, decision-engine equivalence, scanner recall,
the PMP entry budget, compartment exclusivity, stall semantics, transition
orderings, and hazard fidelity.
"""

from __future__ import annotations

import random
import time

import corpus
from pmp_oracle import ByteMapOracle
from test_pmp import SPACE, _random_state

from sallyport.harness import VerdictKind, _resolve_timer, evaluate, run_suite
from sallyport.hart import RunOutcome
from sallyport.layout import (
    ENTRY_TRANSITION,
    build_layout,
    build_multi_firmware_layout,
    firmware_cfg0,
    firmware_cfg_bytes,
    principal_cfg0,
    principal_cfg_bytes,
)
from sallyport.monitor import Machine, system_layout
from sallyport.pmp import Access, AccessQuery, Mode, check_access
from sallyport.scanner import verify_firmware

MIE = 0x8

# Boot plus every exchange flow the protocol defines: firmware service
# round-trips, enclave create/enter/ocall/resume/exit/delete, preemption.
EXCHANGE_FLOWS = (
    {"enclave_variants": ("ocall", "compute")},
    {"os_variant": "service_only"},
    {"os_variant": "enclave_round", "enclave_variants": ("compute",)},
    {"os_variant": "ocall_round", "enclave_variants": ("ocall",)},
)


def _pmp_class(csr_name: str) -> bool:
    return csr_name.startswith(("pmpcfg", "pmpaddr")) or csr_name == "mseccfg"


def _assert_exclusive_views(machine: Machine, run) -> None:
    """No cycle of the run executes under a state that opens both P and F.

    Pre-lockdown cycles are held to a stronger claim instead: only the
    monitor's own boot programming may run before the whitelist arms.
    """
    layout = machine.layout
    p_side = (layout.p_code, layout.p_data)
    f_side = (layout.f_code, layout.f_data)

    def opens(state, regions, mode):
        return any(
            check_access(state, AccessQuery(pt, 4, mode, acc)).allowed
            for region in regions
            for pt in (region.base, region.base + region.size // 2,
                       region.end - 4)
            for acc in (Access.READ, Access.WRITE, Access.EXEC))

    cache: dict = {}
    for ev in run.events:
        state = run.pmp_states[ev.pmp_hash]
        if not state.mmwp:
            assert ev.mode == "M" and layout.p_code.contains(ev.pc), ev
            continue
        mode = Mode.MACHINE if ev.mode == "M" else Mode.SUPERVISOR_USER
        key = (ev.pmp_hash, ev.mode)
        if key not in cache:
            cache[key] = (opens(state, p_side, mode),
                          opens(state, f_side, mode))
        p_open, f_open = cache[key]
        assert not (p_open and f_open), (
            f"cycle {ev.cycle}: pmp state {ev.pmp_hash} opens both "
            f"compartments to {ev.mode}")


def _assert_transition_orderings(machine: Machine, run) -> None:
    """Hand-off and return must follow the load-bearing step order.

    Entering firmware: trap vector first, data-entry retarget second, the
    view grant retiring last. Leaving: the door's self-revocation falls
    through into the transition page, which masks interrupts, restores the
    vector, restores the PMP pair, and only then jumps back into P.
    """
    layout = machine.layout
    symbols = machine.symbols
    writes = run.events_of("CsrWrite")
    execs = run.events_of("Exec")

    p_writes = [ev for ev in writes if layout.p_code.contains(ev.pc)]
    grants = [i for i, ev in enumerate(p_writes)
              if ev.data["csr"] == "pmpcfg0"
              and ev.data["new"] == firmware_cfg0(layout)]
    assert grants, "the trace never hands control to firmware"
    for i in grants:
        assert i >= 2
        vector, retarget = p_writes[i - 2], p_writes[i - 1]
        assert vector.data["csr"] == "mtvec"
        assert vector.data["new"] == symbols["f_handler"]
        assert retarget.data["csr"] == "pmpaddr2"
        assert retarget.data["new"] == layout.transition.addr_register

    door = layout.spentry_address
    clears = [ev for ev in writes
              if ev.pc == door and ev.data["csr"] == "pmpcfg0"
              and ev.data["new"] == 0]
    assert clears, "firmware never left through the door"
    for clear in clears:
        landing = next((ev for ev in execs if ev.cycle > clear.cycle), None)
        assert landing is not None
        assert landing.pc == layout.transition.base, (
            f"door retired at cycle {clear.cycle} but execution resumed at "
            f"{landing.pc:#x}, not the transition page")

        restore = [ev for ev in writes
                   if ev.cycle > clear.cycle
                   and layout.transition.contains(ev.pc)][:4]
        assert [ev.data["csr"] for ev in restore] == [
            "mstatus", "mtvec", "pmpaddr2", "pmpcfg0"]
        masked, vector, retarget, grant = restore
        assert masked.data["new"] & MIE == 0
        assert vector.data["new"] == symbols["p_handler"]
        assert retarget.data["new"] == layout.p_data.addr_register
        assert grant.data["new"] == principal_cfg0(layout)

        back = next((ev for ev in execs
                     if ev.cycle > grant.cycle
                     and not layout.transition.contains(ev.pc)), None)
        assert back is not None
        assert layout.p_code.contains(back.pc), (
            f"transition jumped to {back.pc:#x} instead of P")


def test_attack_suite_green():
    """Every builtin scenario matches its expected verdict, none breach."""
    start = time.perf_counter()
    results = run_suite()
    elapsed = time.perf_counter() - start
    assert len(results) >= 14
    mismatched = [r.scenario.name for r in results if not r.matched]
    assert mismatched == []
    breached = [r.scenario.name for r in results
                if r.verdict.kind is VerdictKind.BREACH]
    assert breached == []
    assert elapsed < 10.0, f"suite took {elapsed:.2f}s"


def test_access_engine_matches_brute_force_oracle():
    """1e5+ randomized queries, zero disagreements with the byte-map oracle."""
    rng = random.Random(0x5A11)
    modes = (Mode.MACHINE, Mode.SUPERVISOR_USER)
    accesses = (Access.READ, Access.WRITE, Access.EXEC)
    queries = 0
    start = time.perf_counter()
    for _ in range(150):
        state = _random_state(rng)
        oracle = ByteMapOracle(state, SPACE)
        for _ in range(700):
            size = rng.choice((1, 2, 4, 8))
            query = AccessQuery(rng.randrange(0, SPACE - size), size,
                                rng.choice(modes), rng.choice(accesses))
            assert check_access(state, query).allowed == oracle.allowed(query), (
                state, query)
            queries += 1
    elapsed = time.perf_counter() - start
    assert queries >= 100_000
    assert elapsed < 30.0, f"{queries} queries took {elapsed:.2f}s"


def test_scanner_full_recall_on_adversarial_corpus():
    """No planted site escapes, and the exit stub is never a finding."""
    rng = random.Random(0xF1A6)
    blobs = sites = accepted = rejected = 0
    for _ in range(1000):
        blob, planted = corpus.build_case(rng)
        door = len(blob) - 4
        truth = corpus.ground_truth_offsets(blob) - {door}
        report = verify_firmware(blob, door, expected_size=len(blob))
        found = {f.offset for f in report.findings}
        assert door not in found
        assert planted <= found, f"missed planted sites {sorted(planted - found)}"
        assert found == truth, (
            f"missed {sorted(truth - found)}, spurious {sorted(found - truth)}")
        assert report.accepted == (not truth)
        blobs += 1
        sites += len(planted)
        accepted += report.accepted
        rejected += not report.accepted
    assert blobs >= 1000
    assert sites >= 500
    assert accepted and rejected


def test_entry_budget_and_sallyport_index():
    """Six runtime entries, the door's grant at index 8, multi-image adds one."""
    layout = build_layout()
    assignment = layout.entry_assignment()
    assert len(assignment) == 6
    assert set(assignment.values()) == {0, 1, 2, 3, 4, ENTRY_TRANSITION}
    assert assignment["transition"] == ENTRY_TRANSITION >= 8
    assert layout.entries_required() == 9
    used = set(principal_cfg_bytes(layout)) | set(firmware_cfg_bytes(layout))
    assert used == set(assignment.values())
    for k in (1, 2, 3):
        assert build_layout(enclave_count=k).entries_required() == max(9, 6 + 2 * k)

    multi = build_multi_firmware_layout(2)
    assert multi.PERMANENT_ENTRIES == 7
    occupied = (set(multi.cfg_bytes(firmware_view=False))
                | set(multi.cfg_bytes(firmware_view=True)))
    assert len(occupied) == multi.PERMANENT_ENTRIES
    assert multi.entries_required() == layout.entries_required() + 1


def test_no_machine_state_opens_both_compartments():
    """Exhaustive over every cycle of boot plus every exchange flow."""
    for config in EXCHANGE_FLOWS:
        machine = Machine(**config)
        run = machine.run()
        assert run.outcome is RunOutcome.STOPPED, config
        assert evaluate(machine, run).kind is VerdictKind.CLEAN, config
        _assert_exclusive_views(machine, run)


def test_timer_race_stalls_promptly_and_never_breaches():
    """The mis-ordered return window strands the machine, fast, stays sealed."""
    config = {"os_variant": "service_only", "vulnerable_transition": True}
    layout = system_layout()
    anchor = _resolve_timer({"kind": "transition-grant", "offset": 0},
                            config, layout)
    stalled = 0
    for fire_at in range(anchor, anchor + 5):
        machine = Machine(layout, **config)
        run = machine.run(timer_at=fire_at)
        verdict = evaluate(machine, run)
        assert verdict.kind is not VerdictKind.BREACH, fire_at
        if verdict.kind is VerdictKind.UNRECOVERABLE_STALL:
            stalled += 1
            assert run.final.cycle - fire_at <= 50, (
                f"fired at {fire_at}, still stepping at {run.final.cycle}")
        else:
            assert verdict.kind is VerdictKind.CLEAN, (fire_at, verdict)
    assert stalled >= 1


def test_transition_traces_match_golden_order():
    """One service round-trip replays the exact hand-off and return steps."""
    machine = Machine(system_layout(), os_variant="service_only")
    run = machine.run()
    assert run.outcome is RunOutcome.STOPPED
    assert evaluate(machine, run).kind is VerdictKind.CLEAN
    _assert_transition_orderings(machine, run)


def test_hazard_window_preserves_guarantees_with_flushes():
    """Window 3: suite still green, orderings hold, every PMP write flushes."""
    results = run_suite(hazard_window=3)
    assert [r.scenario.name for r in results if not r.matched] == []
    assert all(r.verdict.kind is not VerdictKind.BREACH for r in results)

    flushes = 0
    for result in results:
        run = result.run
        if run is None or run.refused:
            continue
        events = run.events
        for i, ev in enumerate(events):
            if ev.kind == "CsrWrite" and _pmp_class(ev.data["csr"]):
                assert i + 1 < len(events)
                nxt = events[i + 1]
                assert nxt.kind == "PipelineFlush", (
                    f"{ev.data['csr']} write at cycle {ev.cycle} retired "
                    f"without a flush")
                assert nxt.cycle == ev.cycle
                assert nxt.data["window"] == 3
                flushes += 1
    assert flushes

    machine = Machine(system_layout(), os_variant="service_only",
                      hazard_window=3)
    run = machine.run()
    assert run.outcome is RunOutcome.STOPPED
    _assert_transition_orderings(machine, run)
    _assert_exclusive_views(machine, run)
