"""Whole-machine assembly: images in memory, the boot gate, instrumented runs.

A Machine owns one generated system (layout + images), places the octets
into flat memory, applies the boot-time firmware scan exactly the way the
monitor's first-stage loader would, and then steps the hart with optional
adversarial instrumentation: a timer programmed to a chosen cycle, or a
takeover of the firmware compartment at a trigger point (modeling a
hijacked indirect jump inside firmware, with attacker-chosen registers).

Runs produce a MachineRun carrying the full trace, every PMP state the
machine held keyed by digest, and the boot scan report. The ND-JSON trace
serialization emits one line per event, preceded the first time each PMP
digest appears by a snapshot line with the full register file of that state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional

from .hart import (
    Hart,
    HartState,
    Memory,
    RunOutcome,
    inject_timer,
    run_until,
)
from .layout import CompartmentLayout, build_layout
from .pmp import Mode, PmpState
from .program import MASK64, REG, SystemImages, generate_system
from .scanner import ScanReport, verify_firmware

RESET_PMP = PmpState(addr=(0,) * 16, cfg=(0,) * 16, mseccfg=0)

DEFAULT_STEP_BUDGET = 120_000


def system_layout(enclave_count: int = 0) -> CompartmentLayout:
    """The default machine map, with P's code region sized for the monitor."""
    return build_layout(p_code_size=0x1000, enclave_count=enclave_count)


@dataclass
class Possession:
    """Takeover of firmware execution at a trigger point.

    When control reaches ``when_exec_at`` (before that instruction executes),
    the hart's pc is forced to ``pc`` and the named registers are loaded with
    attacker values. The machine mode and PMP state are whatever firmware
    legitimately had: the adversary gains arbitrary control flow inside the
    compartment, nothing more.
    """

    pc: int
    regs: dict = field(default_factory=dict)
    when_exec_at: int = 0


@dataclass
class MachineRun:
    refused: bool
    scan_report: Optional[ScanReport]
    outcome: Optional[RunOutcome]
    steps: int
    events: list
    final: Optional[HartState]
    pmp_states: dict
    possession_cycle: Optional[int] = None

    def events_of(self, kind: str) -> list:
        return [ev for ev in self.events if ev.kind == kind]


class Machine:
    """One simulated platform: memory, hart, boot gate, injection hooks."""

    def __init__(self, layout: Optional[CompartmentLayout] = None, *,
                 images: Optional[SystemImages] = None,
                 f_variant: str = "benign", os_variant: str = "nominal",
                 enclave_variants: tuple = (),
                 vulnerable_transition: bool = False,
                 hazard_window: int = 0, skip_scan: bool = False,
                 trace_exec: bool = True):
        if layout is None:
            layout = system_layout(enclave_count=len(enclave_variants))
        self.layout = layout
        if images is None:
            images = generate_system(
                layout, f_variant=f_variant, os_variant=os_variant,
                enclave_variants=enclave_variants,
                vulnerable_transition=vulnerable_transition)
        self.images = images
        self.symbols = images.symbols

        self.mem = Memory(layout.memory_size)
        self.mem.write_blob(layout.p_code.base, images.p_code)
        self.mem.write_blob(layout.f_code.base, images.f_code)
        self.mem.write_blob(layout.transition.base, images.transition)
        self.mem.write_blob(layout.os.base, images.os)
        for k, blob in enumerate(images.enclaves):
            self.mem.write_blob(layout.enclaves[k].private.base, blob)

        # the boot gate: firmware that does not scan clean never runs
        if skip_scan:
            self.scan_report = None
            self.boot_allowed = True
        else:
            self.scan_report = verify_firmware(
                images.f_code, layout.spentry_offset,
                expected_size=layout.f_code.size)
            self.boot_allowed = self.scan_report.accepted

        self.stepper = Hart(
            HartState(pc=layout.p_code.base, mode=Mode.MACHINE),
            self.mem, RESET_PMP, hazard_window=hazard_window,
            trace_exec=trace_exec)

    def checkpoint(self) -> tuple:
        return self.stepper.state.copy(), self.stepper.pmp

    def restore(self, snapshot: tuple) -> None:
        state, pmp = snapshot
        self.stepper.restore(state.copy(), pmp)

    def run(self, *, max_steps: int = DEFAULT_STEP_BUDGET,
            possession: Optional[Possession] = None,
            timer_at: Optional[int] = None,
            stop: Optional[Callable[[HartState], bool]] = None) -> MachineRun:
        if not self.boot_allowed:
            return MachineRun(True, self.scan_report, None, 0, [], None, {})
        if timer_at is not None:
            inject_timer(self.stepper.state, timer_at)
        park = self.symbols["park"]
        stop_fn = stop if stop is not None else (lambda st: st.pc == park)

        fired_cycle: Optional[int] = None
        pre_events: list = []
        hook = None
        if possession is not None:
            def seize():
                nonlocal fired_cycle
                st = self.stepper.state
                st.pc = possession.pc
                for name, value in possession.regs.items():
                    st.gprs[REG[name]] = value & MASK64
                fired_cycle = st.cycle
                return self.stepper.annotate("AdversaryPossession", {
                    "target_pc": possession.pc,
                    "regs": dict(possession.regs),
                })

            if self.stepper.state.pc == possession.when_exec_at:
                pre_events.append(seize())
            else:
                def hook(_result):
                    if (fired_cycle is None
                            and self.stepper.state.pc == possession.when_exec_at):
                        return [seize()]
                    return None

        result = run_until(self.stepper, stop_fn, max_steps, on_step=hook)
        return MachineRun(
            refused=False, scan_report=self.scan_report,
            outcome=result.outcome, steps=result.steps,
            events=pre_events + result.events,
            final=self.stepper.state,
            pmp_states={st.digest(): st for st in self.stepper.pmp_states_seen()},
            possession_cycle=fired_cycle)

    def read_results(self, count: int) -> list:
        """The OS result journal, as the OS left it in its own memory."""
        base = self.symbols["results"]
        return [self.mem.load(base + 8 * i, 8) for i in range(count)]

    def read_result(self, name: str) -> int:
        return self.read_results(len(self.images.os_slots))[self.images.os_slots[name]]


def _snapshot_dict(digest: str, state: PmpState) -> dict:
    return {
        "kind": "PmpSnapshot",
        "pmp_hash": digest,
        "addr": list(state.addr),
        "cfg": list(state.cfg),
        "mseccfg": state.mseccfg,
    }


def trace_to_ndjson(run: MachineRun) -> str:
    """One JSON object per line; PMP snapshots precede first use of a digest."""
    lines = []
    seen: set = set()
    for ev in run.events:
        if ev.pmp_hash not in seen and ev.pmp_hash in run.pmp_states:
            seen.add(ev.pmp_hash)
            lines.append(json.dumps(_snapshot_dict(ev.pmp_hash,
                                                   run.pmp_states[ev.pmp_hash])))
        lines.append(json.dumps(ev.to_json_dict()))
    return "\n".join(lines) + ("\n" if lines else "")


def write_trace(run: MachineRun, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(trace_to_ndjson(run))
