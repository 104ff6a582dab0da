"""Attack scenarios and the trace-invariant checker.

The engine enforces isolation while it runs; this module re-derives the same
rules from the finished trace, the layout and the PMP states alone. A
simulator defect that silently allowed a forbidden access therefore surfaces
here as a violation, and a forged trace event is caught the same way.
"""

from dataclasses import dataclass, field, replace
from enum import Enum, auto
from typing import Callable, Optional

from . import isa
from .hart import RunOutcome, TraceEvent, run_until
from .layout import CompartmentLayout, Region
from .monitor import Machine, MachineRun, Possession, system_layout
from .pmp import Access, AccessQuery, Mode, check_access

CAUSE_ILLEGAL = 2
ECALL_CAUSES = (8, 9, 11)
FAULT_CAUSES = (1, 5, 7)


class TraceFormatError(ValueError):
    """The event stream is structurally unusable for invariant checking."""


@dataclass(frozen=True)
class Violation:
    invariant: str
    cycle: int
    detail: str
    event: Optional[TraceEvent] = None

    def to_json_dict(self) -> dict:
        return {"invariant": self.invariant, "cycle": self.cycle,
                "detail": self.detail}


class VerdictKind(Enum):
    CLEAN = auto()
    BLOCKED = auto()
    UNRECOVERABLE_STALL = auto()
    BREACH = auto()


class Mechanism(Enum):
    TRAP_DENIED = auto()
    ILLEGAL_INSTRUCTION = auto()
    SCAN_REJECTED = auto()
    SELF_LOCKOUT = auto()


@dataclass
class Verdict:
    kind: VerdictKind
    mechanism: Optional[Mechanism] = None
    evidence: list = field(default_factory=list)

    def to_json_dict(self) -> dict:
        out: dict = {"verdict": self.kind.name.lower()}
        if self.mechanism is not None:
            out["mechanism"] = self.mechanism.name.lower()
        if self.evidence:
            out["evidence"] = [
                v.to_json_dict() if hasattr(v, "to_json_dict") else str(v)
                for v in self.evidence]
        return out


@dataclass
class Scenario:
    """One adversarial (or baseline) machine configuration plus expectations.

    Adversary behaviour lives in the generated images (variant selection) or
    in injected events: a scheduled timer and at most one Possession. The
    scenario never reaches into simulator internals directly.
    """

    name: str
    description: str
    config: dict = field(default_factory=dict)
    timer_plan: Optional[dict] = None
    possession: Optional[dict] = None
    expected: VerdictKind = VerdictKind.CLEAN
    expected_mechanism: Optional[Mechanism] = None
    checks: Optional[Callable[[Machine, MachineRun], list]] = None
    runner: Optional[str] = None  # dispatch override for composite scenarios


@dataclass
class ScenarioResult:
    scenario: Scenario
    verdict: Verdict
    steps: int
    matched: bool
    notes: list = field(default_factory=list)
    run: Optional[MachineRun] = None
    timer_at: Optional[int] = None

    def to_json_dict(self) -> dict:
        out = {"name": self.scenario.name, "steps": self.steps,
               "expected": self.scenario.expected.name.lower(),
               "matched": self.matched}
        out.update(self.verdict.to_json_dict())
        if self.timer_at is not None:
            out["timer_at"] = self.timer_at
        if self.notes:
            out["notes"] = list(self.notes)
        return out


# --- actor attribution ---------------------------------------------------------


def actor_at(layout: CompartmentLayout, mode: str, pc: int) -> str:
    """Which compartment owns the instruction at pc in the given mode."""
    if mode == "M":
        if layout.p_code.contains(pc) or layout.transition.contains(pc):
            return "monitor"
        if layout.f_code.contains(pc):
            return "firmware"
        return "unknown-m"
    if layout.os.contains(pc):
        return "os"
    for k, enclave in enumerate(layout.enclaves):
        if enclave.private.contains(pc) or enclave.shared.contains(pc):
            return f"enclave{k}"
    return "unknown-su"


def _footprint(layout: CompartmentLayout, actor: str) -> tuple:
    """Regions the actor may legitimately load from or store to."""
    if actor == "monitor":
        return (layout.p_data,)
    if actor == "firmware":
        return (layout.f_data,)
    if actor == "os":
        return (layout.os,)
    if actor.startswith("enclave"):
        enclave = layout.enclaves[int(actor[len("enclave"):])]
        return (enclave.private, enclave.shared)
    return ()


# --- expected access matrices ----------------------------------------------------

_ACCESSES = (Access.READ, Access.WRITE, Access.EXEC)


def _sample_regions(layout: CompartmentLayout) -> list:
    regions = [layout.p_code, layout.p_data, layout.f_code, layout.f_data,
               layout.transition, layout.os]
    for enclave in layout.enclaves:
        regions.extend((enclave.private, enclave.shared))
    return regions


def _region_points(region: Region) -> tuple:
    return (region.base, region.base + region.size // 2, region.end - 4)


def expected_view_rows(layout: CompartmentLayout, actor: str) -> dict:
    """The access matrix the named actor must see, per the protocol design.

    Keys are (region_name, access); rows cover only the actor's own
    execution mode, which is the view the compartment can actually probe.
    This table is written out from the protocol's permission plan, not
    computed through the PMP model, so the two routes stay independent.
    """
    rows = {(region.name, acc): False
            for region in _sample_regions(layout) for acc in _ACCESSES}
    if actor == "os":
        for acc in _ACCESSES:
            rows[("os", acc)] = True
    elif actor.startswith("enclave"):
        k = int(actor[len("enclave"):])
        priv, shared = layout.enclaves[k].private, layout.enclaves[k].shared
        for acc in _ACCESSES:
            rows[(priv.name, acc)] = True
        rows[(shared.name, Access.READ)] = True
        rows[(shared.name, Access.WRITE)] = True
    elif actor == "firmware":
        rows[("f_code", Access.READ)] = True
        rows[("f_code", Access.EXEC)] = True
        rows[("f_data", Access.READ)] = True
        rows[("f_data", Access.WRITE)] = True
    else:
        raise ValueError(f"no expected matrix for actor {actor!r}")
    return rows


def sample_view_rows(layout: CompartmentLayout, pmp_state, actor: str) -> dict:
    """The matrix the engine actually grants, sampled over region points."""
    mode = Mode.MACHINE if actor in ("monitor", "firmware") else Mode.SUPERVISOR_USER
    rows = {}
    for region in _sample_regions(layout):
        for acc in _ACCESSES:
            rows[(region.name, acc)] = all(
                check_access(pmp_state, AccessQuery(pt, 4, mode, acc)).allowed
                for pt in _region_points(region))
    return rows


# --- invariant checking ----------------------------------------------------------


def _is_pmp_csr(name: str) -> bool:
    addr = isa.CSR_ADDRS.get(name)
    if addr is None:
        return False
    return isa.classify_csr(addr).cls in (
        isa.CsrClass.PMP_CFG, isa.CsrClass.PMP_ADDR, isa.CsrClass.MSECCFG)


def check_invariants(run: MachineRun, layout: CompartmentLayout,
                     symbols: dict) -> list:
    """All trace-level isolation properties; empty list means no breach.

    Beyond violations this never reports on self-revocation: a PMP write
    from firmware whose new value is zero only destroys the writer's own
    view (the SPEntry semantics executed from the wrong place), which the
    verdict logic classifies as lockout, not breach.
    """
    violations: list = []
    spentry = symbols["spentry"]
    p_handler = symbols["p_handler"]
    f_handler = symbols["f_handler"]
    grant_word = layout.p_code.end - 4

    def p_owned(pc: int) -> bool:
        return layout.p_code.contains(pc) or layout.transition.contains(pc)

    for ev in run.events:
        if not isinstance(ev, TraceEvent):
            raise TraceFormatError(f"not a trace event: {ev!r}")

        if ev.kind == "CsrWrite":
            try:
                csr, new = ev.data["csr"], ev.data["new"]
            except (TypeError, KeyError) as exc:
                raise TraceFormatError(f"CsrWrite without csr/new at "
                                       f"cycle {ev.cycle}") from exc
            if _is_pmp_csr(csr):
                if p_owned(ev.pc) or ev.pc == spentry:
                    pass
                elif (csr == "pmpcfg0" and new == 0
                      and layout.f_code.contains(ev.pc)):
                    pass  # self-lockout, handled by the verdict
                else:
                    violations.append(Violation(
                        "Inv-ePMP", ev.cycle,
                        f"{csr} written from {ev.pc:#x}", ev))
            if csr == "mtvec":
                if not p_owned(ev.pc):
                    violations.append(Violation(
                        "Inv-MT", ev.cycle,
                        f"trap vector written from {ev.pc:#x}", ev))
                elif new not in (p_handler, f_handler):
                    violations.append(Violation(
                        "Inv-MT", ev.cycle,
                        f"trap vector set to foreign target {new:#x}", ev))

        elif ev.kind == "ModeSwitch":
            if ev.data["to"] == "M":
                if not layout.p_code.contains(ev.data["target_pc"]):
                    violations.append(Violation(
                        "Inv-EnEx", ev.cycle,
                        f"machine mode entered at "
                        f"{ev.data['target_pc']:#x}", ev))
            elif not layout.p_code.contains(ev.pc):
                violations.append(Violation(
                    "Inv-EnEx", ev.cycle,
                    f"machine mode left from {ev.pc:#x}", ev))

        elif ev.kind == "MemAccess" and ev.data["allowed"]:
            actor = actor_at(layout, ev.mode, ev.pc)
            addr = ev.data["addr"]
            if not any(r.contains(addr) for r in _footprint(layout, actor)):
                violations.append(Violation(
                    "Inv-View", ev.cycle,
                    f"{actor} at {ev.pc:#x} granted {ev.data['access']} "
                    f"of {addr:#x}", ev))

    violations.extend(_check_interface(run, layout, symbols, grant_word))
    violations.extend(_check_mutual_exclusion(run, layout))
    violations.extend(_check_view_conformance(run, layout))
    return violations


def _check_interface(run: MachineRun, layout: CompartmentLayout,
                     symbols: dict, grant_word: int) -> list:
    """Inv-Intf: firmware is entered only over the monitor's hand-off word
    and left only through the SPEntry fall-through. Needs retire events;
    lean traces are checked by the event-level rules alone."""
    violations = []
    spentry = symbols["spentry"]
    possessed = [ev.cycle for ev in run.events
                 if ev.kind == "AdversaryPossession"]
    prev = None
    for ev in run.events:
        if ev.kind != "Exec" or ev.mode != "M":
            continue
        if (layout.p_code.contains(ev.pc) or layout.transition.contains(ev.pc)
                or layout.f_code.contains(ev.pc)):
            in_f = layout.f_code.contains(ev.pc)
        else:
            violations.append(Violation(
                "Inv-EnEx", ev.cycle,
                f"machine execution outside any owned region at {ev.pc:#x}",
                ev))
            prev = ev
            continue
        if prev is not None:
            was_f = layout.f_code.contains(prev.pc)
            adversary = any(prev.cycle <= c <= ev.cycle for c in possessed)
            if in_f and not was_f and not adversary and prev.pc != grant_word:
                violations.append(Violation(
                    "Inv-Intf", ev.cycle,
                    f"firmware entered from {prev.pc:#x}, not the hand-off",
                    ev))
            if was_f and not in_f and not adversary:
                if prev.pc != spentry or ev.pc != layout.transition.base:
                    violations.append(Violation(
                        "Inv-Intf", ev.cycle,
                        f"firmware left from {prev.pc:#x} to {ev.pc:#x}, "
                        f"not the SPEntry door", ev))
        prev = ev
    return violations


def _check_mutual_exclusion(run: MachineRun, layout: CompartmentLayout) -> list:
    """No locked-down machine state opens both a P region and an F region."""
    violations = []
    p_side = (layout.p_code, layout.p_data)
    f_side = (layout.f_code, layout.f_data)

    def open_for_m(state, regions) -> bool:
        return any(
            check_access(state, AccessQuery(pt, 4, Mode.MACHINE, acc)).allowed
            for region in regions for pt in _region_points(region)
            for acc in _ACCESSES)

    for digest, state in run.pmp_states.items():
        if not state.mmwp:
            continue  # pre-lockdown boot programming, trusted P only
        if open_for_m(state, p_side) and open_for_m(state, f_side):
            violations.append(Violation(
                "Inv-Mutex", -1,
                f"pmp state {digest} grants machine mode both P and F "
                f"regions", None))
    return violations


def _check_view_conformance(run: MachineRun, layout: CompartmentLayout) -> list:
    """Every retired instruction of a confined actor ran under exactly the
    access matrix its view prescribes."""
    violations = []
    verified: dict = {}
    for ev in run.events:
        if ev.kind != "Exec":
            continue
        actor = actor_at(layout, ev.mode, ev.pc)
        if actor in ("monitor", "unknown-m", "unknown-su"):
            continue  # monitor cycles are covered by Inv-Mutex
        key = (ev.pmp_hash, actor)
        if key in verified:
            continue
        state = run.pmp_states.get(ev.pmp_hash)
        if state is None:
            raise TraceFormatError(f"event references unknown pmp state "
                                   f"{ev.pmp_hash}")
        expect = expected_view_rows(layout, actor)
        got = sample_view_rows(layout, state, actor)
        for cell, allowed in got.items():
            if allowed != expect[cell]:
                region, acc = cell
                violations.append(Violation(
                    "Inv-View", ev.cycle,
                    f"{actor} view: {region} {acc.name.lower()} is "
                    f"{'open' if allowed else 'closed'}, expected the "
                    f"opposite", ev))
        verified[key] = True
    return violations


# --- scenario execution -----------------------------------------------------------


def _resolve_timer(plan: dict, config: dict,
                   layout: CompartmentLayout) -> int:
    """Turn a symbolic timer plan into an absolute cycle via a twin dry run."""
    twin = Machine(layout, **config)
    dry = twin.run()
    kind = plan["kind"]
    if kind == "transition-grant":
        lay = twin.layout
        writes = [ev for ev in dry.events_of("CsrWrite")
                  if ev.data["csr"] == "pmpcfg0"
                  and lay.transition.contains(ev.pc)]
        anchor = writes[0].cycle
    elif kind == "enclave-exec":
        enc = twin.layout.enclaves[plan.get("enclave", 0)]
        anchor = next(ev.cycle for ev in dry.events_of("Exec")
                      if enc.private.contains(ev.pc))
    elif kind == "first-su":
        anchor = next(ev.cycle for ev in dry.events_of("ModeSwitch")
                      if ev.data["to"] == "SU")
    else:
        raise ValueError(f"unknown timer plan {kind!r}")
    return anchor + plan.get("offset", 1)


def _enclave_count(config: dict) -> int:
    return len(config.get("enclave_variants", ()))


def run_scenario(scenario: Scenario,
                 layout: Optional[CompartmentLayout] = None,
                 hazard_window: int = 0) -> ScenarioResult:
    if scenario.runner == "rop-sweep":
        return _run_rop_sweep(scenario, layout, hazard_window)

    config = dict(scenario.config)
    if layout is None:
        layout = system_layout(_enclave_count(config))
    machine = Machine(layout, hazard_window=hazard_window, **config)

    timer_at = None
    if scenario.timer_plan is not None:
        timer_at = _resolve_timer(scenario.timer_plan, config, layout)
    possession = None
    if scenario.possession is not None:
        spec = scenario.possession
        possession = Possession(
            pc=machine.symbols[spec["pc_symbol"]],
            regs=dict(spec.get("regs", {})),
            when_exec_at=machine.symbols[spec["trigger_symbol"]])

    run = machine.run(timer_at=timer_at, possession=possession)
    verdict = evaluate(machine, run)
    result = _finish(scenario, machine, run, verdict)
    result.timer_at = timer_at
    return result


def evaluate(machine: Machine, run: MachineRun) -> Verdict:
    """Classify one finished run. Precedence: breach, stall, blocked, clean."""
    if run.refused:
        return Verdict(VerdictKind.BLOCKED, Mechanism.SCAN_REJECTED,
                       evidence=list(machine.scan_report.findings))
    violations = check_invariants(run, machine.layout, machine.symbols)
    if violations:
        return Verdict(VerdictKind.BREACH, evidence=violations)
    if run.outcome is not RunOutcome.STOPPED:
        # a revocation executed anywhere but the door only strands the writer
        door = machine.symbols["spentry"]
        lockouts = [ev for ev in run.events_of("CsrWrite")
                    if ev.data["csr"] == "pmpcfg0" and ev.data["new"] == 0
                    and machine.layout.f_code.contains(ev.pc)
                    and ev.pc != door]
        if lockouts:
            return Verdict(VerdictKind.BLOCKED, Mechanism.SELF_LOCKOUT,
                           evidence=lockouts[:1])
        evidence: list = run.events_of("Trap")[-1:]
        if run.outcome is RunOutcome.STEP_BUDGET_EXHAUSTED:
            evidence.append(f"no forward progress within {run.steps} steps")
        return Verdict(VerdictKind.UNRECOVERABLE_STALL, evidence=evidence)
    faults = [ev for ev in run.events_of("Trap")
              if not ev.data["interrupt"]
              and ev.data["cause"] not in ECALL_CAUSES]
    if faults:
        mech = (Mechanism.ILLEGAL_INSTRUCTION
                if faults[0].data["cause"] == CAUSE_ILLEGAL
                else Mechanism.TRAP_DENIED)
        return Verdict(VerdictKind.BLOCKED, mech, evidence=faults[:1])
    return Verdict(VerdictKind.CLEAN)


def _finish(scenario: Scenario, machine: Machine, run: MachineRun,
            verdict: Verdict) -> ScenarioResult:
    notes = []
    if scenario.checks is not None:
        notes = list(scenario.checks(machine, run))
    matched = (verdict.kind is scenario.expected and not notes)
    if scenario.expected_mechanism is not None:
        matched = matched and verdict.mechanism is scenario.expected_mechanism
    return ScenarioResult(scenario=scenario, verdict=verdict, steps=run.steps,
                          matched=matched, notes=notes, run=run)


def _sweep_offsets(size: int) -> list:
    """Halfword-dense over the genuine instruction stream and the exit door,
    spot checks over the zero padding in between (every word of it decodes
    identically, so stride there costs no coverage)."""
    head = min(0x400, size)
    tail = max(head, size - 0x40)
    offsets = list(range(0, head, 2))
    offsets += list(range(head, tail, 0x40))
    offsets += list(range(tail, size, 2))
    return offsets


def _run_rop_sweep(scenario: Scenario, layout: Optional[CompartmentLayout],
                   hazard_window: int) -> ScenarioResult:
    """Seize firmware control at hundreds of offsets inside its code region.

    Each attempt restores the same pre-service checkpoint, forces control to
    the offset through a Possession, and watches the event stream for any
    granted access or PMP write the view forbids. Traces run without retire
    events for speed; the event-level rules (which never need them) stay in
    force for every attempt.
    """
    config = dict(scenario.config)
    if layout is None:
        layout = system_layout(_enclave_count(config))
    machine = Machine(layout, hazard_window=hazard_window, trace_exec=False,
                      **config)
    f_serve = machine.symbols["f_serve"]
    park = machine.symbols["park"]
    su = Mode.SUPERVISOR_USER

    first = machine.run(stop=lambda st: st.pc == f_serve)
    if first.outcome is not RunOutcome.STOPPED:
        verdict = Verdict(VerdictKind.UNRECOVERABLE_STALL)
        return _finish(scenario, machine, first, verdict)
    snapshot = machine.checkpoint()

    violations: list = []
    outcomes: dict = {}
    steps = first.steps
    spentry = machine.symbols["spentry"]
    for offset in _sweep_offsets(layout.f_code.size):
        target = layout.f_code.base + offset
        machine.restore(snapshot)
        machine.mem.begin_journal()
        attempt = machine.run(
            max_steps=800,
            possession=Possession(pc=target, regs={"t0": 0},
                                  when_exec_at=f_serve),
            stop=lambda st: st.pc == park or st.mode is su)
        machine.mem.rollback()
        steps += attempt.steps
        outcomes[attempt.outcome.name] = outcomes.get(attempt.outcome.name, 0) + 1
        for ev in attempt.events:
            if ev.kind == "CsrWrite" and _is_pmp_csr(ev.data["csr"]):
                benign = (ev.pc == spentry
                          or layout.p_code.contains(ev.pc)
                          or layout.transition.contains(ev.pc)
                          or (ev.data["csr"] == "pmpcfg0"
                              and ev.data["new"] == 0))
                if not benign:
                    violations.append(Violation(
                        "Inv-ePMP", ev.cycle,
                        f"offset {offset:#x}: {ev.data['csr']} written from "
                        f"{ev.pc:#x}", ev))
            elif ev.kind == "MemAccess" and ev.data["allowed"]:
                actor = actor_at(layout, ev.mode, ev.pc)
                footprint = _footprint(layout, actor)
                if not any(r.contains(ev.data["addr"]) for r in footprint):
                    violations.append(Violation(
                        "Inv-View", ev.cycle,
                        f"offset {offset:#x}: {actor} granted "
                        f"{ev.data['access']} of {ev.data['addr']:#x}", ev))

    if violations:
        verdict = Verdict(VerdictKind.BREACH, evidence=violations)
    else:
        verdict = Verdict(VerdictKind.BLOCKED, Mechanism.TRAP_DENIED)
    result = _finish(scenario, machine, first, verdict)
    result.steps = steps
    result.notes.insert(0, "attempt outcomes: " + ", ".join(
        f"{name}={count}" for name, count in sorted(outcomes.items())))
    return result


# --- the builtin suite -------------------------------------------------------------


def _clamp_check(slot: str, expect: int):
    def check(machine: Machine, run: MachineRun) -> list:
        got = machine.read_result(slot)
        if got != expect:
            return [f"result {slot}={got:#x}, expected {expect:#x}"]
        return []
    return check


def _canary_check(slot: str = "service_canary"):
    return _clamp_check(slot, 0x5151)


def _marker_check(marker: int):
    def check(machine: Machine, run: MachineRun) -> list:
        notes = _clamp_check("enter", marker)(machine, run)
        notes += _clamp_check("canary", 0x5151)(machine, run)
        return notes
    return check


def builtin_suite() -> list:
    """Every attack the protocol must absorb, plus the functional baseline."""
    blocked = VerdictKind.BLOCKED
    denied = Mechanism.TRAP_DENIED
    illegal = Mechanism.ILLEGAL_INSTRUCTION

    def nominal_checks(machine: Machine, run: MachineRun) -> list:
        notes = []
        for slot, expect in (("service", 0xC), ("app", 0x54), ("create", 0),
                             ("enter", 0xC), ("ocall_payload", 0x42),
                             ("ocall_final", 0x22), ("delete", 0),
                             ("canary", 0x5151)):
            notes += _clamp_check(slot, expect)(machine, run)
        return notes

    scenarios = [
        Scenario(
            name="nominal-flows",
            description="boot plus every exchange flow, all results exact",
            config={"enclave_variants": ("ocall", "compute")},
            checks=nominal_checks),
        Scenario(
            name="os-timer-trap",
            description="timer lands while the OS runs; service still exact",
            config={"os_variant": "service_only"},
            timer_plan={"kind": "first-su", "offset": 3},
            checks=_clamp_check("service", 0xC)),
        Scenario(
            name="s-mode-pmp-write",
            description="the OS tries to rewrite pmpcfg0",
            config={"os_variant": "probe_pmp_write"},
            expected=blocked, expected_mechanism=illegal,
            checks=_clamp_check("probe", 0x51)),
        Scenario(
            name="s-mode-mtvec-write",
            description="the OS tries to retarget the trap vector",
            config={"os_variant": "probe_mtvec_write"},
            expected=blocked, expected_mechanism=illegal,
            checks=_clamp_check("probe", 0x51)),
        Scenario(
            name="s-mode-jump-to-firmware",
            description="the OS jumps straight at firmware's entry",
            config={"os_variant": "probe_jump_to_f"},
            expected=blocked, expected_mechanism=denied,
            checks=_clamp_check("probe", 0x51)),
        Scenario(
            name="s-mode-read-monitor-data",
            description="the OS dereferences the monitor's state page",
            config={"os_variant": "probe_read_p_data"},
            expected=blocked, expected_mechanism=denied,
            checks=_clamp_check("probe", 0x51)),
        Scenario(
            name="s-mode-read-firmware-data",
            description="the OS dereferences firmware's scratch page",
            config={"os_variant": "probe_read_f_data"},
            expected=blocked, expected_mechanism=denied,
            checks=_clamp_check("probe", 0x51)),
        Scenario(
            name="firmware-read-monitor-data",
            description="firmware loads from the monitor's state page",
            config={"f_variant": "probe_read_p_data",
                    "os_variant": "service_only"},
            expected=blocked, expected_mechanism=denied,
            checks=_canary_check()),
        Scenario(
            name="firmware-write-monitor-data",
            description="firmware stores to the monitor's state page",
            config={"f_variant": "probe_write_p_data",
                    "os_variant": "service_only"},
            expected=blocked, expected_mechanism=denied,
            checks=_canary_check()),
        Scenario(
            name="firmware-read-monitor-code",
            description="firmware reads the monitor's code",
            config={"f_variant": "probe_read_p_code",
                    "os_variant": "service_only"},
            expected=blocked, expected_mechanism=denied,
            checks=_canary_check()),
        Scenario(
            name="firmware-write-monitor-code",
            description="firmware patches the monitor's code",
            config={"f_variant": "probe_write_p_code",
                    "os_variant": "service_only"},
            expected=blocked, expected_mechanism=denied,
            checks=_canary_check()),
        Scenario(
            name="firmware-execute-monitor-code",
            description="firmware jumps into the monitor",
            config={"f_variant": "probe_exec_p_code",
                    "os_variant": "service_only"},
            expected=blocked, expected_mechanism=denied,
            checks=_canary_check()),
        Scenario(
            name="firmware-execute-transition",
            description="firmware jumps into the return path directly",
            config={"f_variant": "probe_exec_transition",
                    "os_variant": "service_only"},
            expected=blocked, expected_mechanism=denied,
            checks=_canary_check()),
        Scenario(
            name="firmware-read-os-memory",
            description="firmware reads OS memory during a service call",
            config={"f_variant": "probe_read_os",
                    "os_variant": "service_only"},
            expected=blocked, expected_mechanism=denied,
            checks=_canary_check()),
        Scenario(
            name="firmware-write-os-memory",
            description="firmware writes OS memory during a service call",
            config={"f_variant": "probe_write_os",
                    "os_variant": "service_only"},
            expected=blocked, expected_mechanism=denied,
            checks=_canary_check()),
        Scenario(
            name="firmware-read-enclave-memory",
            description="firmware reads an enclave's private region",
            config={"f_variant": "probe_read_enclave",
                    "os_variant": "service_only",
                    "enclave_variants": ("compute",)},
            expected=blocked, expected_mechanism=denied,
            checks=_canary_check()),
        Scenario(
            name="firmware-write-own-code",
            description="firmware tries to patch itself at run time",
            config={"f_variant": "probe_write_own_code",
                    "os_variant": "service_only"},
            expected=blocked, expected_mechanism=denied,
            checks=_canary_check()),
        Scenario(
            name="firmware-execute-own-data",
            description="firmware jumps into its writable scratch page",
            config={"f_variant": "probe_exec_own_data",
                    "os_variant": "service_only"},
            expected=blocked, expected_mechanism=denied,
            checks=_canary_check()),
        Scenario(
            name="firmware-rop-sweep",
            description="control forced to every halfword offset of firmware",
            config={"os_variant": "service_only"},
            runner="rop-sweep",
            expected=blocked, expected_mechanism=denied),
        Scenario(
            name="firmware-spentry-door",
            description="jump to the exit door with crafted registers",
            config={"os_variant": "service_only"},
            possession={"pc_symbol": "spentry", "trigger_symbol": "f_serve",
                        "regs": {"a0": 0xABCDEF, "t0": 0x9D9D9D9D,
                                 "ra": 0xDEAD}},
            checks=_clamp_check("service", 0xEF)),
        Scenario(
            name="firmware-gadget-self-lockout",
            description="scan bypassed; misaligned PMP gadget executed",
            config={"f_variant": "gadget_pmp_carrier",
                    "os_variant": "service_only", "skip_scan": True},
            possession={"pc_symbol": "gadget_misaligned",
                        "trigger_symbol": "f_serve", "regs": {"t0": 0}},
            expected=blocked, expected_mechanism=Mechanism.SELF_LOCKOUT),
        Scenario(
            name="firmware-timer-race",
            description="timer pending inside the mis-ordered return window",
            config={"os_variant": "service_only",
                    "vulnerable_transition": True},
            timer_plan={"kind": "transition-grant", "offset": 1},
            expected=VerdictKind.UNRECOVERABLE_STALL),
        Scenario(
            name="safe-transition-under-timer",
            description="same timer schedule against the hardened ordering",
            config={"os_variant": "service_only",
                    "vulnerable_transition": False},
            timer_plan={"kind": "transition-grant", "offset": 1},
            checks=_clamp_check("service", 0xC)),
        Scenario(
            name="gadget-mtvec-planted",
            description="firmware image carries a trap-vector write",
            config={"f_variant": "gadget_mtvec"},
            expected=blocked, expected_mechanism=Mechanism.SCAN_REJECTED),
        Scenario(
            name="gadget-pmp-planted",
            description="firmware image embeds a misaligned PMP write",
            config={"f_variant": "gadget_pmp_carrier"},
            expected=blocked, expected_mechanism=Mechanism.SCAN_REJECTED),
        Scenario(
            name="iago-return-values",
            description="firmware returns a poisoned 64-bit result",
            config={"f_variant": "iago", "os_variant": "service_only"},
            checks=_clamp_check("service", 0x78)),
        Scenario(
            name="forged-resume-context",
            description="firmware plants callee registers and a resume pc",
            config={"f_variant": "forged_resume",
                    "os_variant": "service_only"},
            checks=_clamp_check("service", 0x99)),
        Scenario(
            name="enclave-snoop-sibling",
            description="an enclave dereferences its sibling's memory",
            config={"os_variant": "enclave_round",
                    "enclave_variants": ("snoop_sibling", "compute")},
            expected=blocked, expected_mechanism=denied,
            checks=_marker_check(0xF)),
        Scenario(
            name="enclave-snoop-os",
            description="an enclave dereferences OS memory",
            config={"os_variant": "enclave_round",
                    "enclave_variants": ("snoop_os",)},
            expected=blocked, expected_mechanism=denied,
            checks=_marker_check(0xF)),
        Scenario(
            name="enclave-snoop-monitor-data",
            description="an enclave dereferences the monitor's state page",
            config={"os_variant": "enclave_round",
                    "enclave_variants": ("snoop_p_data",)},
            expected=blocked, expected_mechanism=denied,
            checks=_marker_check(0xF)),
        Scenario(
            name="enclave-timer-preemption",
            description="timer fires mid-enclave; the OS regains control",
            config={"os_variant": "enclave_round",
                    "enclave_variants": ("ocall",)},
            timer_plan={"kind": "enclave-exec", "offset": 2},
            checks=_marker_check(0xE)),
    ]
    return scenarios


def run_suite(layout: Optional[CompartmentLayout] = None,
              hazard_window: int = 0,
              only: Optional[str] = None,
              overlay: Optional[dict] = None) -> list:
    """Run the builtin scenarios in declaration order.

    ``overlay`` supplies machine settings for scenarios that leave them
    unspecified; a scenario's own config always wins, since pinned settings
    are usually the scenario's point.
    """
    results = []
    for scenario in builtin_suite():
        if only is not None and scenario.name != only:
            continue
        if overlay:
            merged = {**overlay, **scenario.config}
            scenario = replace(scenario, config=merged)
        results.append(run_scenario(scenario, layout=layout,
                                    hazard_window=hazard_window))
    return results
