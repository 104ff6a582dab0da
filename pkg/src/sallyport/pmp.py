"""Physical memory protection state and access checks (16-entry ePMP).

Models the PMP register file the way the rest of the package needs it: 16
entries, configuration bytes packed into the even-numbered 64-bit registers
(pmpcfg0 holds entries 0-7, pmpcfg2 holds entries 8-15; the odd registers do
not exist on RV64), address registers holding physical address >> 2, and the
machine-security register with its three policy bits.

Permission interpretation with machine-mode lockdown (MML) set follows the
ratified enhanced-PMP truth table, where the lock bit is repurposed to select
M-mode rules vs S/U rules and the otherwise reserved R=0/W=1 encodings become
shared regions. With MML clear the legacy meaning applies: lock makes an
entry bind M-mode and become immutable until reset unless the rule-lock
bypass is on. MML and MMWP are sticky once set; the bypass bit can only be
changed while MML is clear. Write semantics under MML deliberately allow
re-creating executable M-mode rules: the runtime protocol depends on a
trusted M-mode writer swapping static configuration values, so the hardware
option that freezes such rules is not modeled.

Access decisions are byte-granular: every octet of the access must be
granted, each octet resolving to its lowest-numbered matching entry.
PmpState is an immutable value; write operations return new states.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, replace
from enum import Enum, auto
from typing import Optional

MSECCFG_MML = 1 << 0
MSECCFG_MMWP = 1 << 1
MSECCFG_RLB = 1 << 2

ENTRY_COUNT = 16

# Valid pmpcfg register numbers on RV64 for a 16-entry implementation.
VALID_CFG_REGS = (0, 2)


class Mode(Enum):
    MACHINE = auto()
    SUPERVISOR_USER = auto()


class Access(Enum):
    READ = auto()
    WRITE = auto()
    EXEC = auto()


class AddressMode(Enum):
    OFF = 0
    TOR = 1
    NA4 = 2
    NAPOT = 3


_CFG_R = 1 << 0
_CFG_W = 1 << 1
_CFG_X = 1 << 2
_CFG_A_SHIFT = 3
_CFG_L = 1 << 7


@dataclass(frozen=True)
class PmpEntryConfig:
    r: bool = False
    w: bool = False
    x: bool = False
    a: AddressMode = AddressMode.OFF
    l: bool = False

    @classmethod
    def from_byte(cls, value: int) -> "PmpEntryConfig":
        return cls(
            r=bool(value & _CFG_R),
            w=bool(value & _CFG_W),
            x=bool(value & _CFG_X),
            a=AddressMode((value >> _CFG_A_SHIFT) & 0b11),
            l=bool(value & _CFG_L),
        )

    def to_byte(self) -> int:
        return (
            (_CFG_R if self.r else 0)
            | (_CFG_W if self.w else 0)
            | (_CFG_X if self.x else 0)
            | (self.a.value << _CFG_A_SHIFT)
            | (_CFG_L if self.l else 0)
        )


def napot_encode(base: int, size: int) -> int:
    """Address-register value covering [base, base+size) as a NAPOT range."""
    if size < 8 or size & (size - 1):
        raise ValueError(f"NAPOT size {size:#x} must be a power of two >= 8")
    if base % size:
        raise ValueError(f"NAPOT base {base:#x} not aligned to size {size:#x}")
    return (base >> 2) | ((size >> 3) - 1)


def cfg_byte(r: bool = False, w: bool = False, x: bool = False,
             a: AddressMode = AddressMode.NAPOT, l: bool = False) -> int:
    return PmpEntryConfig(r=r, w=w, x=x, a=a, l=l).to_byte()


@dataclass(frozen=True)
class AccessQuery:
    addr: int
    size: int
    mode: Mode
    access: Access


@dataclass(frozen=True)
class Decision:
    allowed: bool
    entry_index: Optional[int] = None


@dataclass(frozen=True)
class PmpState:
    addr: tuple = (0,) * ENTRY_COUNT
    cfg: tuple = (0,) * ENTRY_COUNT
    mseccfg: int = 0

    @property
    def mml(self) -> bool:
        return bool(self.mseccfg & MSECCFG_MML)

    @property
    def mmwp(self) -> bool:
        return bool(self.mseccfg & MSECCFG_MMWP)

    @property
    def rlb(self) -> bool:
        return bool(self.mseccfg & MSECCFG_RLB)

    def cfg_register(self, which: int) -> int:
        if which not in VALID_CFG_REGS:
            raise ValueError(f"pmpcfg{which} does not exist on RV64")
        lo = (which // 2) * 8
        value = 0
        for i in range(8):
            value |= self.cfg[lo + i] << (8 * i)
        return value

    def entry(self, i: int) -> PmpEntryConfig:
        return PmpEntryConfig.from_byte(self.cfg[i])

    def digest(self) -> str:
        packed = struct.pack(
            "<16Q16BQ", *self.addr, *self.cfg, self.mseccfg
        )
        return hashlib.sha256(packed).hexdigest()[:16]


def entry_range(state: PmpState, index: int) -> Optional[tuple]:
    """Byte range [lo, hi) matched by entry ``index``, or None when off/empty."""
    cfg = state.entry(index)
    if cfg.a is AddressMode.OFF:
        return None
    reg = state.addr[index]
    if cfg.a is AddressMode.TOR:
        lo = (state.addr[index - 1] << 2) if index > 0 else 0
        hi = reg << 2
        if hi <= lo:
            return None
        return (lo, hi)
    if cfg.a is AddressMode.NA4:
        base = reg << 2
        return (base, base + 4)
    # NAPOT: the count of trailing one bits selects the region size.
    trailing = 0
    probe = reg
    while probe & 1:
        trailing += 1
        probe >>= 1
    size = 8 << trailing
    base = (reg & ~((1 << trailing) - 1)) << 2
    return (base, base + size)


def _entry_permissions(cfg: PmpEntryConfig, mml: bool, mode: Mode) -> tuple:
    """(read, write, exec) granted by a matching entry."""
    if not mml:
        if mode is Mode.MACHINE:
            if cfg.l:
                return (cfg.r, cfg.w, cfg.x)
            return (True, True, True)  # unlocked entries do not bind M-mode
        return (cfg.r, cfg.w, cfg.x)
    # Lockdown: lock selects M-mode vs S/U rules, R=0/W=1 selects shared
    # regions, and L/R/W/X all set is shared read-only.
    bits = (cfg.l, cfg.r, cfg.w, cfg.x)
    if bits == (True, True, True, True):
        return (True, False, False)
    if cfg.w and not cfg.r:
        if not cfg.l:  # shared data region, X degrades S/U to read-only
            if mode is Mode.MACHINE:
                return (True, True, False)
            return (True, not cfg.x, False)
        # shared code region
        if mode is Mode.MACHINE:
            return (cfg.x, False, True)
        return (False, False, True)
    if cfg.l:
        if mode is Mode.MACHINE:
            return (cfg.r, cfg.w, cfg.x)
        return (False, False, False)
    if mode is Mode.MACHINE:
        return (False, False, False)
    return (cfg.r, cfg.w, cfg.x)


def _default_permissions(state: PmpState, mode: Mode) -> tuple:
    """Permissions for an octet no entry matches."""
    if mode is not Mode.MACHINE:
        return (False, False, False)
    if state.mmwp:
        return (False, False, False)
    if state.mml:
        return (True, True, False)  # lockdown removes default executability
    return (True, True, True)


def check_access(state: PmpState, query: AccessQuery) -> Decision:
    """Decide one access. All octets must be granted; the reported entry is
    the one matching the first octet (None when the first octet is unmatched).
    """
    if query.size <= 0:
        raise ValueError(f"access size {query.size} must be positive")
    ranges = [entry_range(state, i) for i in range(ENTRY_COUNT)]
    perm_slot = {Access.READ: 0, Access.WRITE: 1, Access.EXEC: 2}[query.access]
    default = _default_permissions(state, query.mode)
    first_entry: Optional[int] = None
    first = True
    for addr in range(query.addr, query.addr + query.size):
        perms = default
        for i, rng in enumerate(ranges):
            if rng is None or not (rng[0] <= addr < rng[1]):
                continue
            perms = _entry_permissions(state.entry(i), state.mml, query.mode)
            if first:
                first_entry = i
            break
        first = False
        if not perms[perm_slot]:
            return Decision(False, first_entry)
    return Decision(True, first_entry)


def _entry_locked(state: PmpState, index: int) -> bool:
    """Legacy lock: binds only while MML is clear and the bypass is off."""
    if state.mml or state.rlb:
        return False
    return state.entry(index).l


def write_cfg_register(state: PmpState, which: int, value: int) -> PmpState:
    """Write pmpcfg{which}. Locked entries (legacy meaning) keep their old
    byte; reserved bits are cleared; with MML clear the reserved R=0/W=1
    combination is normalized to no-write."""
    if which not in VALID_CFG_REGS:
        raise ValueError(f"pmpcfg{which} does not exist on RV64")
    lo = (which // 2) * 8
    cfg = list(state.cfg)
    for i in range(8):
        new_byte = (value >> (8 * i)) & 0xFF
        new_byte &= 0x9F  # bits 5-6 are reserved
        if not state.mml and (new_byte & _CFG_W) and not (new_byte & _CFG_R):
            new_byte &= ~_CFG_W & 0xFF
        if _entry_locked(state, lo + i):
            continue
        cfg[lo + i] = new_byte
    return replace(state, cfg=tuple(cfg))


def write_addr_register(state: PmpState, index: int, value: int) -> PmpState:
    """Write pmpaddr{index}; the value is masked to the 54 implemented bits.
    A legacy-locked entry keeps its address, as does the entry below a locked
    TOR entry (its address forms that entry's base)."""
    if not 0 <= index < ENTRY_COUNT:
        raise ValueError(f"pmpaddr{index} out of range")
    if _entry_locked(state, index):
        return state
    if index + 1 < ENTRY_COUNT and _entry_locked(state, index + 1):
        if state.entry(index + 1).a is AddressMode.TOR:
            return state
    addr = list(state.addr)
    addr[index] = value & ((1 << 54) - 1)
    return replace(state, addr=tuple(addr))


def write_mseccfg(state: PmpState, value: int) -> PmpState:
    """Write the machine-security register. MML and MMWP are sticky; the
    rule-lock bypass can only change while MML is clear, and setting MML
    forces it off."""
    new = state.mseccfg & (MSECCFG_MML | MSECCFG_MMWP)
    new |= value & (MSECCFG_MML | MSECCFG_MMWP)
    if not (new & MSECCFG_MML) and not (state.mseccfg & MSECCFG_MML):
        new |= value & MSECCFG_RLB
    return replace(state, mseccfg=new)
