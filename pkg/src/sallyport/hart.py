"""Single-hart RV64 machine state and instruction stepping.

The hart models exactly two privilege levels: MACHINE and a merged
SUPERVISOR_USER (the package never needs S-mode trap delegation or paging).
Every step performs at most one architectural event: take a pending timer
interrupt, or fetch/decode/execute one instruction, or convert a fault into a
trap. Trap entry follows the privileged-architecture rules: the previous
interrupt-enable bit is stacked and interrupts are masked, so M-mode code
runs with interrupts off unless it deliberately re-enables them.

Execution produces TraceEvent records: one Exec event per retired
instruction plus events for denied fetches, memory accesses, CSR writes,
traps, mode switches and (in hazard-fidelity mode) pipeline flushes. Events
carry a digest of the live PMP state so checks can be replayed offline.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum, auto
from typing import Callable, Optional

from . import isa
from .pmp import (
    Access,
    AccessQuery,
    Mode,
    PmpState,
    check_access,
    write_addr_register,
    write_cfg_register,
    write_mseccfg,
)

XLEN_MASK = (1 << 64) - 1

CAUSE_INSTRUCTION_ACCESS_FAULT = 1
CAUSE_ILLEGAL_INSTRUCTION = 2
CAUSE_LOAD_ACCESS_FAULT = 5
CAUSE_STORE_ACCESS_FAULT = 7
CAUSE_ECALL_FROM_SU = 9
CAUSE_ECALL_FROM_M = 11
CAUSE_MACHINE_TIMER = 7  # with the interrupt bit set in mcause

MCAUSE_INTERRUPT_BIT = 1 << 63


class MemoryFault(Exception):
    """Access touching octets the memory does not back."""


class Memory:
    """Flat little-endian physical memory with an optional undo journal."""

    def __init__(self, size: int, base: int = 0):
        self.base = base
        self.size = size
        self.data = bytearray(size)
        self._journal: Optional[list] = None

    def _span(self, addr: int, size: int) -> int:
        off = addr - self.base
        if off < 0 or off + size > self.size:
            raise MemoryFault(f"access [{addr:#x}, +{size}) outside memory")
        return off

    def load(self, addr: int, size: int) -> int:
        off = self._span(addr, size)
        return int.from_bytes(self.data[off:off + size], "little")

    def store(self, addr: int, size: int, value: int) -> None:
        off = self._span(addr, size)
        if self._journal is not None:
            self._journal.append((off, bytes(self.data[off:off + size])))
        self.data[off:off + size] = (value & ((1 << (8 * size)) - 1)).to_bytes(size, "little")

    def write_blob(self, addr: int, blob: bytes) -> None:
        off = self._span(addr, len(blob))
        self.data[off:off + len(blob)] = blob

    def read_blob(self, addr: int, size: int) -> bytes:
        off = self._span(addr, size)
        return bytes(self.data[off:off + size])

    def begin_journal(self) -> None:
        self._journal = []

    def rollback(self) -> None:
        assert self._journal is not None
        for off, old in reversed(self._journal):
            self.data[off:off + len(old)] = old
        self._journal = None


@dataclass
class HartState:
    pc: int = 0
    mode: Mode = Mode.MACHINE
    gprs: list = field(default_factory=lambda: [0] * 32)
    mtvec: int = 0
    mepc: int = 0
    mcause: int = 0
    mtval: int = 0
    mscratch: int = 0
    mstatus_mie: bool = False
    mstatus_mpie: bool = False
    mstatus_mpp: Mode = Mode.SUPERVISOR_USER
    mie_mtie: bool = False
    pending_timer_at: Optional[int] = None
    cycle: int = 0

    def copy(self) -> "HartState":
        c = HartState(**{k: v for k, v in self.__dict__.items() if k != "gprs"})
        c.gprs = list(self.gprs)
        return c


@dataclass
class TraceEvent:
    """One trace record. ``data`` holds kind-specific payload fields."""

    cycle: int
    seq: int
    pc: int
    mode: str
    instruction: str
    pmp_hash: str
    kind: str
    data: dict

    def to_json_dict(self) -> dict:
        return {
            "cycle": self.cycle,
            "seq": self.seq,
            "pc": self.pc,
            "mode": self.mode,
            "instruction": self.instruction,
            "pmp_hash": self.pmp_hash,
            "kind": self.kind,
            "data": self.data,
        }


_MODE_NAMES = {Mode.MACHINE: "M", Mode.SUPERVISOR_USER: "SU"}

_LOAD_SIZES = {0: (1, True), 1: (2, True), 2: (4, True), 3: (8, False),
               4: (1, False), 5: (2, False), 6: (4, False)}
_STORE_SIZES = {0: 1, 1: 2, 2: 4, 3: 8}

_PMP_CFG_IMPLEMENTED = {0x3A0: 0, 0x3A2: 2}


def _sext64(value: int, bits: int) -> int:
    sign = 1 << (bits - 1)
    return ((value & (sign - 1)) - (value & sign)) & XLEN_MASK


def _signed(value: int) -> int:
    return value - (1 << 64) if value >> 63 else value


class StepOutcome(Enum):
    RETIRED = auto()
    TRAPPED = auto()
    INTERRUPTED = auto()


@dataclass
class StepResult:
    hart: HartState
    pmp: PmpState
    events: list
    outcome: StepOutcome
    trap_entry: bool = False  # this step began by vectoring to mtvec


class Hart:
    """Stepper binding a HartState to memory and a PMP state."""

    def __init__(self, hart: HartState, mem: Memory, pmp_state: PmpState,
                 hazard_window: int = 0, trace_exec: bool = True):
        self.state = hart
        self.mem = mem
        self.pmp = pmp_state
        self.hazard_window = hazard_window
        # trace_exec=False drops the per-retirement Exec events (bulk sweeps
        # only need denials, traps, CSR writes and mode switches)
        self.trace_exec = trace_exec
        self.seq = 0
        self._decode_cache: dict = {}
        self._pmp_keep: list = [pmp_state]  # pin states so id() keys stay unique
        self._pmp_hash = pmp_state.digest()
        # access decisions are cached per PMP *content*, so revisiting a
        # state (sweeps restoring snapshots, bounce sequences) stays warm
        self._access_caches: dict = {self._pmp_hash: {}}
        self._access_cache: dict = self._access_caches[self._pmp_hash]

    # -- helpers -------------------------------------------------------------

    def _set_pmp(self, new_state: PmpState) -> None:
        if new_state is not self.pmp:
            self.pmp = new_state
            self._pmp_keep.append(new_state)
            self._pmp_hash = new_state.digest()
            cache = self._access_caches.get(self._pmp_hash)
            if cache is None:
                cache = self._access_caches[self._pmp_hash] = {}
            self._access_cache = cache

    def _allowed(self, addr: int, size: int, access: Access) -> tuple:
        key = (addr, size, self.state.mode, access)
        hit = self._access_cache.get(key)
        if hit is None:
            hit = check_access(self.pmp, AccessQuery(addr, size, self.state.mode, access))
            self._access_cache[key] = hit
        return hit.allowed, hit.entry_index

    def _event(self, kind: str, data: dict, pc: Optional[int] = None,
               instruction: str = "") -> TraceEvent:
        ev = TraceEvent(
            cycle=self.state.cycle, seq=self.seq, pc=self.state.pc if pc is None else pc,
            mode=_MODE_NAMES[self.state.mode], instruction=instruction,
            pmp_hash=self._pmp_hash, kind=kind, data=data,
        )
        self.seq += 1
        return ev

    def annotate(self, kind: str, data: dict) -> TraceEvent:
        """Mint an out-of-band trace event (injections, external meddling)."""
        return self._event(kind, data)

    def pmp_states_seen(self) -> tuple:
        """Every PMP state this hart has held, oldest first."""
        return tuple(self._pmp_keep)

    def restore(self, state: HartState, pmp_state: PmpState) -> None:
        """Rewind architectural state to a snapshot taken earlier."""
        self.state = state
        self._set_pmp(pmp_state)

    def _decode_at(self, pc: int) -> tuple:
        """(instr, fetch_ok). Fetch denial or unbacked memory yields (None, False)."""
        try:
            low = self.mem.load(pc, 2)
        except MemoryFault:
            return None, False
        width = isa.instruction_width(low)
        ok, _ = self._allowed(pc, width, Access.EXEC)
        if not ok:
            return None, False
        if width == 2:
            key = low
            instr = self._decode_cache.get(key)
            if instr is None:
                instr = isa.decode_halfwords(low)
                self._decode_cache[key] = instr
            return instr, True
        try:
            high = self.mem.load(pc + 2, 2)
        except MemoryFault:
            return None, False
        key = (high << 16) | low | (1 << 32)
        instr = self._decode_cache.get(key)
        if instr is None:
            instr = isa.decode_halfwords(low, high)
            self._decode_cache[key] = instr
        return instr, True

    def _take_trap(self, events: list, cause: int, *, interrupt: bool = False,
                   mtval: int = 0, instruction: str = "") -> None:
        s = self.state
        old_mode = s.mode
        s.mepc = s.pc & ~1
        s.mcause = (MCAUSE_INTERRUPT_BIT | cause) if interrupt else cause
        s.mtval = mtval
        s.mstatus_mpie = s.mstatus_mie
        s.mstatus_mie = False
        s.mstatus_mpp = s.mode
        s.mode = Mode.MACHINE
        handler = s.mtvec & ~3
        events.append(self._event("Trap", {
            "cause": cause, "interrupt": interrupt, "handler": handler,
            "mepc": s.mepc,
        }, instruction=instruction))
        if old_mode is not Mode.MACHINE:
            events.append(self._event("ModeSwitch", {
                "from": _MODE_NAMES[old_mode], "to": "M", "target_pc": handler,
            }))
        s.pc = handler

    # -- the step ------------------------------------------------------------

    def step(self) -> StepResult:
        s = self.state
        events: list = []
        s.cycle += 1

        # A due timer interrupt preempts the fetch when the mode's interrupt
        # gating allows it: M-level interrupts are always live in S/U and
        # gated by mstatus.MIE in M.
        if (
            s.pending_timer_at is not None
            and s.cycle >= s.pending_timer_at
            and s.mie_mtie
            and (s.mode is not Mode.MACHINE or s.mstatus_mie)
        ):
            s.pending_timer_at = None
            self._take_trap(events, CAUSE_MACHINE_TIMER, interrupt=True)
            return StepResult(s, self.pmp, events, StepOutcome.INTERRUPTED, trap_entry=True)

        pc = s.pc
        instr, ok = self._decode_at(pc)
        if not ok:
            events.append(self._event("Fetch", {"allowed": False, "width": 4}))
            self._take_trap(events, CAUSE_INSTRUCTION_ACCESS_FAULT, mtval=pc)
            return StepResult(s, self.pmp, events, StepOutcome.TRAPPED, trap_entry=True)

        if self.trace_exec:
            mnemonic = instr.mnemonic()
            events.append(self._event("Exec", {"width": instr.width},
                                      instruction=mnemonic))
        else:
            mnemonic = ""
        outcome = self._execute(instr, events, mnemonic)
        s.gprs[0] = 0
        return StepResult(s, self.pmp, events, outcome)

    def _execute(self, instr, events: list, mnemonic: str) -> StepOutcome:
        s = self.state
        kind = instr.kind
        next_pc = s.pc + instr.width

        if kind is isa.Kind.ILLEGAL:
            self._take_trap(events, CAUSE_ILLEGAL_INSTRUCTION, mtval=instr.raw,
                            instruction=mnemonic)
            return StepOutcome.TRAPPED

        if instr.csr_target is not None:
            return self._execute_csr(instr, events, mnemonic)

        if kind is isa.Kind.LOAD:
            size, signed = _LOAD_SIZES[instr.funct3]
            addr = (s.gprs[instr.rs1] + instr.imm) & XLEN_MASK
            allowed, entry = self._allowed(addr, size, Access.READ)
            events.append(self._event("MemAccess", {
                "addr": addr, "size": size, "access": "read",
                "allowed": allowed, "entry": entry,
            }, instruction=mnemonic))
            if not allowed:
                self._take_trap(events, CAUSE_LOAD_ACCESS_FAULT, mtval=addr,
                                instruction=mnemonic)
                return StepOutcome.TRAPPED
            try:
                value = self.mem.load(addr, size)
            except MemoryFault:
                self._take_trap(events, CAUSE_LOAD_ACCESS_FAULT, mtval=addr,
                                instruction=mnemonic)
                return StepOutcome.TRAPPED
            if signed:
                value = _sext64(value, 8 * size)
            s.gprs[instr.rd] = value
            s.pc = next_pc
            return StepOutcome.RETIRED

        if kind is isa.Kind.STORE:
            size = _STORE_SIZES[instr.funct3]
            addr = (s.gprs[instr.rs1] + instr.imm) & XLEN_MASK
            allowed, entry = self._allowed(addr, size, Access.WRITE)
            events.append(self._event("MemAccess", {
                "addr": addr, "size": size, "access": "write",
                "allowed": allowed, "entry": entry,
            }, instruction=mnemonic))
            if not allowed:
                self._take_trap(events, CAUSE_STORE_ACCESS_FAULT, mtval=addr,
                                instruction=mnemonic)
                return StepOutcome.TRAPPED
            try:
                self.mem.store(addr, size, s.gprs[instr.rs2])
            except MemoryFault:
                self._take_trap(events, CAUSE_STORE_ACCESS_FAULT, mtval=addr,
                                instruction=mnemonic)
                return StepOutcome.TRAPPED
            s.pc = next_pc
            return StepOutcome.RETIRED

        if kind is isa.Kind.JUMP:
            if instr.rd:
                s.gprs[instr.rd] = next_pc
            s.pc = (s.pc + instr.imm) & XLEN_MASK
            return StepOutcome.RETIRED

        if kind is isa.Kind.JUMP_REGISTER:
            target = (s.gprs[instr.rs1] + instr.imm) & XLEN_MASK & ~1
            if instr.rd:
                s.gprs[instr.rd] = next_pc
            s.pc = target
            return StepOutcome.RETIRED

        if kind is isa.Kind.BRANCH:
            taken = self._branch_taken(instr)
            s.pc = (s.pc + instr.imm) & XLEN_MASK if taken else next_pc
            return StepOutcome.RETIRED

        if kind is isa.Kind.ECALL:
            cause = CAUSE_ECALL_FROM_M if s.mode is Mode.MACHINE else CAUSE_ECALL_FROM_SU
            self._take_trap(events, cause, instruction=mnemonic)
            return StepOutcome.TRAPPED

        if kind is isa.Kind.MRET:
            if s.mode is not Mode.MACHINE:
                self._take_trap(events, CAUSE_ILLEGAL_INSTRUCTION, mtval=instr.raw,
                                instruction=mnemonic)
                return StepOutcome.TRAPPED
            old_mode = s.mode
            site = s.pc
            s.mode = s.mstatus_mpp
            s.mstatus_mie = s.mstatus_mpie
            s.mstatus_mpie = True
            s.mstatus_mpp = Mode.SUPERVISOR_USER
            s.pc = s.mepc
            if s.mode is not old_mode:
                # pc names the departing mret; target_pc the arrival, mirroring
                # the trap-side event (pc = faulting site, target_pc = handler)
                events.append(self._event("ModeSwitch", {
                    "from": "M", "to": _MODE_NAMES[s.mode], "target_pc": s.pc,
                }, pc=site, instruction=mnemonic))
            return StepOutcome.RETIRED

        if kind is isa.Kind.WFI:
            s.pc = next_pc
            return StepOutcome.RETIRED

        self._execute_arith(instr)
        s.pc = next_pc
        return StepOutcome.RETIRED

    def _branch_taken(self, instr) -> bool:
        s = self.state
        a, b = s.gprs[instr.rs1], s.gprs[instr.rs2]
        f3 = instr.funct3
        if f3 == 0:
            return a == b
        if f3 == 1:
            return a != b
        if f3 == 4:
            return _signed(a) < _signed(b)
        if f3 == 5:
            return _signed(a) >= _signed(b)
        if f3 == 6:
            return a < b
        return a >= b

    def _execute_arith(self, instr) -> None:
        s = self.state
        op = instr.opcode
        if instr.width == 2 or op == 0x0F:
            return  # compressed non-jumps and fences: no modeled effect
        rs1 = s.gprs[instr.rs1]
        rs2 = s.gprs[instr.rs2]
        f3, f7 = instr.funct3, instr.funct7
        value = 0
        if op == 0x37:  # lui
            value = instr.imm & XLEN_MASK
        elif op == 0x17:  # auipc
            value = (s.pc + instr.imm) & XLEN_MASK
        elif op == 0x13:
            if f3 == 0:
                value = (rs1 + instr.imm) & XLEN_MASK
            elif f3 == 1:
                value = (rs1 << ((instr.imm) & 0x3F)) & XLEN_MASK
            elif f3 == 2:
                value = int(_signed(rs1) < instr.imm)
            elif f3 == 3:
                value = int(rs1 < (instr.imm & XLEN_MASK))
            elif f3 == 4:
                value = (rs1 ^ instr.imm) & XLEN_MASK
            elif f3 == 5:
                shamt = instr.imm & 0x3F
                if (instr.imm >> 10) & 1:
                    value = (_signed(rs1) >> shamt) & XLEN_MASK
                else:
                    value = rs1 >> shamt
            elif f3 == 6:
                value = (rs1 | instr.imm) & XLEN_MASK
            else:
                value = (rs1 & instr.imm) & XLEN_MASK
        elif op == 0x1B:
            if f3 == 0:
                value = _sext64((rs1 + instr.imm) & 0xFFFFFFFF, 32)
            elif f3 == 1:
                value = _sext64((rs1 << (instr.imm & 0x1F)) & 0xFFFFFFFF, 32)
            else:
                value = 0
        elif op == 0x33:
            if f3 == 0:
                value = (rs1 - rs2 if f7 == 0x20 else rs1 + rs2) & XLEN_MASK
            elif f3 == 1:
                value = (rs1 << (rs2 & 0x3F)) & XLEN_MASK
            elif f3 == 2:
                value = int(_signed(rs1) < _signed(rs2))
            elif f3 == 3:
                value = int(rs1 < rs2)
            elif f3 == 4:
                value = rs1 ^ rs2
            elif f3 == 5:
                shamt = rs2 & 0x3F
                value = ((_signed(rs1) >> shamt) & XLEN_MASK) if f7 == 0x20 else rs1 >> shamt
            elif f3 == 6:
                value = rs1 | rs2
            else:
                value = rs1 & rs2
        elif op == 0x3B:
            if f3 == 0:
                value = _sext64((rs1 - rs2 if f7 == 0x20 else rs1 + rs2) & 0xFFFFFFFF, 32)
            else:
                value = 0
        if instr.rd:
            s.gprs[instr.rd] = value

    # -- CSR execution -------------------------------------------------------

    def _execute_csr(self, instr, events: list, mnemonic: str) -> StepOutcome:
        s = self.state
        addr = instr.csr_target.value
        if s.mode is not Mode.MACHINE:
            self._take_trap(events, CAUSE_ILLEGAL_INSTRUCTION, mtval=instr.raw,
                            instruction=mnemonic)
            return StepOutcome.TRAPPED
        reader = self._csr_read_value(addr)
        if reader is None:
            self._take_trap(events, CAUSE_ILLEGAL_INSTRUCTION, mtval=instr.raw,
                            instruction=mnemonic)
            return StepOutcome.TRAPPED
        old = reader
        src = instr.imm if instr.source_is_immediate else s.gprs[instr.rs1]
        if instr.kind is isa.Kind.CSR_SET:
            new = old | src
        elif instr.kind is isa.Kind.CSR_CLEAR:
            new = old & ~src & XLEN_MASK
        else:
            new = src & XLEN_MASK
        if isa.writes_csr(instr):
            self._csr_write(addr, new)
            events.append(self._event("CsrWrite", {
                "csr": instr.csr_target.name, "old": old,
                "new": self._csr_read_value(addr),
            }, instruction=mnemonic))
            if self.hazard_window and instr.csr_target.cls in (
                isa.CsrClass.PMP_CFG, isa.CsrClass.PMP_ADDR, isa.CsrClass.MSECCFG,
            ):
                events.append(self._event("PipelineFlush", {
                    "window": self.hazard_window,
                }, instruction=mnemonic))
        if instr.rd:
            s.gprs[instr.rd] = old
        s.pc += instr.width
        return StepOutcome.RETIRED

    def _csr_read_value(self, addr: int) -> Optional[int]:
        """Current value, or None when the CSR is not implemented."""
        s = self.state
        if addr == isa.CSR_MSTATUS:
            mpp = 0b11 if s.mstatus_mpp is Mode.MACHINE else 0b01
            return (int(s.mstatus_mie) << 3) | (int(s.mstatus_mpie) << 7) | (mpp << 11)
        if addr == isa.CSR_MIE:
            return int(s.mie_mtie) << 7
        if addr == isa.CSR_MIP:
            due = s.pending_timer_at is not None and s.cycle >= s.pending_timer_at
            return int(due) << 7
        if addr == isa.CSR_MTVEC:
            return s.mtvec
        if addr == isa.CSR_MSCRATCH:
            return s.mscratch
        if addr == isa.CSR_MEPC:
            return s.mepc
        if addr == isa.CSR_MCAUSE:
            return s.mcause
        if addr == isa.CSR_MTVAL:
            return s.mtval
        if addr == isa.CSR_MSECCFG:
            return self.pmp.mseccfg
        if addr in _PMP_CFG_IMPLEMENTED:
            return self.pmp.cfg_register(_PMP_CFG_IMPLEMENTED[addr])
        if isa.CSR_PMPADDR0 <= addr < isa.CSR_PMPADDR0 + 16:
            return self.pmp.addr[addr - isa.CSR_PMPADDR0]
        return None

    def _csr_write(self, addr: int, value: int) -> None:
        s = self.state
        if addr == isa.CSR_MSTATUS:
            s.mstatus_mie = bool(value & (1 << 3))
            s.mstatus_mpie = bool(value & (1 << 7))
            s.mstatus_mpp = Mode.MACHINE if ((value >> 11) & 0b11) == 0b11 else Mode.SUPERVISOR_USER
        elif addr == isa.CSR_MIE:
            s.mie_mtie = bool(value & (1 << 7))
        elif addr == isa.CSR_MIP:
            pass  # timer pending is wired to the injection model, not writable
        elif addr == isa.CSR_MTVEC:
            s.mtvec = value & ~3 & XLEN_MASK
        elif addr == isa.CSR_MSCRATCH:
            s.mscratch = value
        elif addr == isa.CSR_MEPC:
            s.mepc = value & ~1 & XLEN_MASK
        elif addr == isa.CSR_MCAUSE:
            s.mcause = value
        elif addr == isa.CSR_MTVAL:
            s.mtval = value
        elif addr == isa.CSR_MSECCFG:
            self._set_pmp(write_mseccfg(self.pmp, value))
        elif addr in _PMP_CFG_IMPLEMENTED:
            self._set_pmp(write_cfg_register(self.pmp, _PMP_CFG_IMPLEMENTED[addr], value))
        elif isa.CSR_PMPADDR0 <= addr < isa.CSR_PMPADDR0 + 16:
            self._set_pmp(write_addr_register(self.pmp, addr - isa.CSR_PMPADDR0, value))


def inject_timer(hart: HartState, fire_at_cycle: int) -> None:
    """Arrange a machine timer interrupt to become pending at the given cycle."""
    hart.pending_timer_at = fire_at_cycle


class RunOutcome(Enum):
    STOPPED = auto()
    STALL = auto()
    STEP_BUDGET_EXHAUSTED = auto()


@dataclass
class RunResult:
    outcome: RunOutcome
    steps: int
    events: list


# Trap entries that immediately fault again, this many times in a row, are an
# unrecoverable stall (the handler itself cannot be fetched).
STALL_THRESHOLD = 2


def run_until(stepper: Hart, stop: Callable[[HartState], bool],
              max_steps: int = 10000,
              on_step: Optional[Callable] = None) -> RunResult:
    """Step until ``stop(state)`` holds, the machine stalls, or the budget ends.

    A stall is a trap whose handler cannot even be fetched: the entry fetch
    faults, which re-vectors to the same handler, which faults again. Two
    consecutive failed handler entries are conclusive because the PMP state
    cannot change while no instruction retires.

    ``on_step`` is called after every step with the StepResult; it may mutate
    the hart (fault and adversary injection) and may return extra TraceEvents
    to splice into the stream.
    """
    events: list = []
    failed_entries = 0
    prev_vectored = False
    for n in range(max_steps):
        if stop(stepper.state):
            return RunResult(RunOutcome.STOPPED, n, events)
        result = stepper.step()
        events.extend(result.events)
        if on_step is not None:
            extra = on_step(result)
            if extra:
                events.extend(extra)
        first = result.events[0] if result.events else None
        fetch_fault = (first is not None and first.kind == "Fetch"
                       and not first.data["allowed"])
        if fetch_fault and prev_vectored:
            failed_entries += 1
            if failed_entries >= STALL_THRESHOLD:
                return RunResult(RunOutcome.STALL, n + 1, events)
        else:
            failed_entries = 0
        prev_vectored = result.outcome is not StepOutcome.RETIRED
    return RunResult(RunOutcome.STEP_BUDGET_EXHAUSTED, max_steps, events)
