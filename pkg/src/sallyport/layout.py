"""Compartment memory map and the PMP views derived from it.

Region inventory for the isolated monitor (P), the firmware it distrusts
(F), the S/U operating system, the transition page, and optional enclaves.
Every region is NAPOT-shaped so one address register describes it.

The entry budget is the tight part. Six PMP entries cover steady-state
execution: OS, P code, P data, F code, F data and the transition page. The
rule that hides the transition page from running firmware does not get its
own entry: while F runs, P's data entry is retargeted to the transition
page with an all-deny byte (P data needs no entry in that view anyway), and
the page's own grant lives above it at index 8 where the deny shadows it.
Each enclave adds two entries (private and shared). Index 8 being reserved
means a platform needs max(9, 6 + 2k) entries for k enclaves.

With several firmware images the budget grows by exactly one: entry and
exit transition stubs bracket each image, their two grants are permanent
(indexes 8 and 9, retargeted per image) and the two in-view deny rules ride
the P code and P data entries, giving 7 permanent entries.

Views are produced as complete PmpState values so callers can diff the
machine's live configuration against the intended matrix byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .pmp import (
    MSECCFG_MML,
    MSECCFG_MMWP,
    PmpState,
    cfg_byte,
    napot_encode,
)

# Entry assignment, fixed by protocol.
ENTRY_OS = 0
ENTRY_P_CODE = 1
ENTRY_P_DATA = 2
ENTRY_F_CODE = 3
ENTRY_F_DATA = 4
ENTRY_TRANSITION = 8
ENTRY_MULTI_ENTER = 9  # multi-firmware layouts only

# Enclave pairs fill the indexes the fixed assignment leaves free.
_ENCLAVE_SLOT_POOL = (5, 6, 7, 9, 10, 11, 12, 13, 14, 15)

# cfg bytes for the views (all NAPOT).
BYTE_OS = cfg_byte(r=True, w=True, x=True)            # S/U rwx
BYTE_M_CODE = cfg_byte(r=True, x=True, l=True)        # M r-x
BYTE_M_DATA = cfg_byte(r=True, w=True, l=True)        # M rw-
BYTE_DENY = cfg_byte(l=True)                          # nobody
BYTE_ENCLAVE_PRIV = cfg_byte(r=True, w=True, x=True)  # S/U rwx
BYTE_ENCLAVE_SHARED = cfg_byte(r=True, w=True)        # S/U rw-
BYTE_OFF = 0

LOCKDOWN_MSECCFG = MSECCFG_MML | MSECCFG_MMWP


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class Region:
    name: str
    base: int
    size: int

    @property
    def end(self) -> int:
        return self.base + self.size

    def contains(self, addr: int) -> bool:
        return self.base <= addr < self.end

    @property
    def addr_register(self) -> int:
        return napot_encode(self.base, self.size)

    def to_json_dict(self) -> dict:
        return {"name": self.name, "base": self.base, "size": self.size}


@dataclass(frozen=True)
class Enclave:
    private: Region
    shared: Region


@dataclass(frozen=True)
class CompartmentLayout:
    memory_size: int
    p_code: Region
    p_data: Region
    f_code: Region
    f_data: Region
    transition: Region
    os: Region
    enclaves: tuple = ()

    @property
    def spentry_offset(self) -> int:
        """Image offset of the exit-stub word: the final word of F's code."""
        return self.f_code.size - 4

    @property
    def spentry_address(self) -> int:
        return self.f_code.end - 4

    def regions(self) -> dict:
        out = {
            "os": self.os,
            "p_code": self.p_code,
            "p_data": self.p_data,
            "f_code": self.f_code,
            "f_data": self.f_data,
            "transition": self.transition,
        }
        for k, enclave in enumerate(self.enclaves):
            out[f"enclave{k}_priv"] = enclave.private
            out[f"enclave{k}_shared"] = enclave.shared
        return out

    def region_named(self, name: str) -> Region:
        return self.regions()[name]

    def app_window(self) -> Region:
        """Upper half of the OS region, where the demo application sits."""
        half = self.os.size // 2
        return Region("app", self.os.base + half, half)

    def enclave_slots(self, k: int) -> tuple:
        """(private_entry, shared_entry) PMP indexes for enclave k."""
        return _ENCLAVE_SLOT_POOL[2 * k], _ENCLAVE_SLOT_POOL[2 * k + 1]

    def entries_required(self) -> int:
        """Smallest PMP entry count a platform needs for this layout."""
        k = len(self.enclaves)
        if not k:
            return ENTRY_TRANSITION + 1
        return max(ENTRY_TRANSITION + 1,
                   1 + max(self.enclave_slots(k - 1)),
                   6 + 2 * k)

    def to_json_dict(self) -> dict:
        return {
            "memory_size": self.memory_size,
            "regions": {name: r.to_json_dict() for name, r in self.regions().items()},
            "pmp_entries": self.entry_assignment(),
            "entries_required": self.entries_required(),
            "spentry_offset": self.spentry_offset,
        }

    def entry_assignment(self) -> dict:
        out = {
            "os": ENTRY_OS,
            "p_code": ENTRY_P_CODE,
            "p_data": ENTRY_P_DATA,
            "f_code": ENTRY_F_CODE,
            "f_data": ENTRY_F_DATA,
            "transition": ENTRY_TRANSITION,
        }
        for k in range(len(self.enclaves)):
            priv, shared = self.enclave_slots(k)
            out[f"enclave{k}_priv"] = priv
            out[f"enclave{k}_shared"] = shared
        return out


def _check_napot(region: Region) -> None:
    size = region.size
    if size < 8 or size & (size - 1):
        raise LayoutError(f"{region.name}: size {size:#x} is not a power of two >= 8")
    if region.base % size:
        raise LayoutError(f"{region.name}: base {region.base:#x} not aligned to {size:#x}")


def validate_layout(layout: CompartmentLayout) -> None:
    regions = list(layout.regions().values())
    for region in regions:
        _check_napot(region)
        if region.base < 0 or region.end > layout.memory_size:
            raise LayoutError(f"{region.name}: outside backed memory")
    regions.sort(key=lambda r: r.base)
    for a, b in zip(regions, regions[1:]):
        if a.end > b.base:
            raise LayoutError(f"{a.name} overlaps {b.name}")
    if layout.f_code.base != layout.p_code.end:
        raise LayoutError("firmware code must start at the end of P's code "
                          "(the view hand-off falls through that boundary)")
    if layout.transition.base != layout.f_code.end:
        raise LayoutError("transition page must start at the end of firmware "
                          "code (the exit stub falls through that boundary)")
    if layout.f_code.size < 8:
        raise LayoutError("firmware region cannot hold an exit stub")
    if 2 * len(layout.enclaves) > len(_ENCLAVE_SLOT_POOL):
        raise LayoutError("too many enclaves for a 16-entry PMP")
    if layout.entries_required() > 16:
        raise LayoutError("layout demands more PMP entries than the PMP has")


def build_layout(memory_size: int = 1 << 20, *, base: int = 0x10000,
                 p_code_size: int = 0x800, f_code_size: int = 0x400,
                 transition_size: int = 0x400, p_data_size: int = 0x800,
                 f_data_size: int = 0x800, os_size: int = 0x4000,
                 enclave_count: int = 0,
                 enclave_size: int = 0x1000) -> CompartmentLayout:
    """The default map: P and F packed together low, OS and enclaves higher."""
    p_code = Region("p_code", base, p_code_size)
    f_code = Region("f_code", p_code.end, f_code_size)
    transition = Region("transition", f_code.end, transition_size)
    p_data = Region("p_data", transition.end, p_data_size)
    f_data = Region("f_data", p_data.end, f_data_size)
    os = Region("os", base + 0x10000, os_size)
    enclaves = []
    cursor = base + 0x20000
    for k in range(enclave_count):
        private = Region(f"enclave{k}_priv", cursor, enclave_size)
        shared = Region(f"enclave{k}_shared", private.end, enclave_size)
        enclaves.append(Enclave(private, shared))
        cursor = shared.end
    layout = CompartmentLayout(
        memory_size=memory_size, p_code=p_code, p_data=p_data, f_code=f_code,
        f_data=f_data, transition=transition, os=os, enclaves=tuple(enclaves),
    )
    validate_layout(layout)
    return layout


# --- view matrices ----------------------------------------------------------


def _addr_tuple(layout: CompartmentLayout, *, firmware_view: bool = False) -> tuple:
    addr = [0] * 16
    addr[ENTRY_OS] = layout.os.addr_register
    addr[ENTRY_P_CODE] = layout.p_code.addr_register
    # While F runs, P's data entry is retargeted to deny the transition page.
    addr[ENTRY_P_DATA] = (layout.transition.addr_register if firmware_view
                          else layout.p_data.addr_register)
    addr[ENTRY_F_CODE] = layout.f_code.addr_register
    addr[ENTRY_F_DATA] = layout.f_data.addr_register
    addr[ENTRY_TRANSITION] = layout.transition.addr_register
    for k, enclave in enumerate(layout.enclaves):
        priv, shared = layout.enclave_slots(k)
        addr[priv] = enclave.private.addr_register
        addr[shared] = enclave.shared.addr_register
    return tuple(addr)


def _pack_cfg(byte_by_entry: dict) -> tuple:
    cfg = [0] * 16
    for entry, byte in byte_by_entry.items():
        cfg[entry] = byte
    return tuple(cfg)


def principal_cfg_bytes(layout: CompartmentLayout) -> dict:
    """The view P re-establishes whenever it runs: also the OS-running view."""
    return {
        ENTRY_OS: BYTE_OS,
        ENTRY_P_CODE: BYTE_M_CODE,
        ENTRY_P_DATA: BYTE_M_DATA,
        ENTRY_TRANSITION: BYTE_M_CODE,
    }


def firmware_cfg_bytes(layout: CompartmentLayout) -> dict:
    return {
        ENTRY_OS: BYTE_OS,
        ENTRY_P_DATA: BYTE_DENY,  # retargeted over the transition page
        ENTRY_F_CODE: BYTE_M_CODE,
        ENTRY_F_DATA: BYTE_M_DATA,
        ENTRY_TRANSITION: BYTE_M_CODE,
    }


def enclave_cfg_bytes(layout: CompartmentLayout, k: int) -> dict:
    priv, shared = layout.enclave_slots(k)
    return {
        ENTRY_P_CODE: BYTE_M_CODE,
        ENTRY_P_DATA: BYTE_M_DATA,
        ENTRY_TRANSITION: BYTE_M_CODE,
        priv: BYTE_ENCLAVE_PRIV,
        shared: BYTE_ENCLAVE_SHARED,
    }


def view_state(layout: CompartmentLayout, view: str, enclave: int = 0) -> PmpState:
    """Complete PMP state for one steady view: principal, firmware, enclave."""
    if view == "principal":
        bytes_by_entry = principal_cfg_bytes(layout)
        addr = _addr_tuple(layout)
    elif view == "firmware":
        bytes_by_entry = firmware_cfg_bytes(layout)
        addr = _addr_tuple(layout, firmware_view=True)
    elif view == "enclave":
        bytes_by_entry = enclave_cfg_bytes(layout, enclave)
        addr = _addr_tuple(layout)
    else:
        raise ValueError(f"unknown view {view!r}")
    return PmpState(addr=addr, cfg=_pack_cfg(bytes_by_entry),
                    mseccfg=LOCKDOWN_MSECCFG)


def cfg_register_value(byte_by_entry: dict, which: int) -> int:
    """Pack the bytes for pmpcfg0 (entries 0-7) or pmpcfg2 (entries 8-15)."""
    value = 0
    for entry, byte in byte_by_entry.items():
        if which * 4 <= entry < which * 4 + 8:
            value |= byte << (8 * (entry - which * 4))
    return value


def principal_cfg0(layout: CompartmentLayout) -> int:
    return cfg_register_value(principal_cfg_bytes(layout), 0)


def firmware_cfg0(layout: CompartmentLayout) -> int:
    return cfg_register_value(firmware_cfg_bytes(layout), 0)


def boot_state(layout: CompartmentLayout) -> PmpState:
    """PMP state after P's boot sequence: the principal view, locked down."""
    return view_state(layout, "principal")


# --- multiple firmware images -----------------------------------------------


@dataclass(frozen=True)
class FirmwareBracket:
    """One firmware image fenced by its entry and exit transition stubs."""

    enter_stub: Region
    code: Region
    exit_stub: Region
    data: Region

    @property
    def spentry_address(self) -> int:
        return self.code.end - 4


@dataclass(frozen=True)
class MultiFirmwareLayout:
    memory_size: int
    p_code: Region
    p_data: Region
    os: Region
    brackets: tuple

    PERMANENT_ENTRIES = 7  # os, p_code, p_data, f_code, f_data, exit, enter

    def entries_required(self) -> int:
        return ENTRY_MULTI_ENTER + 1

    def addr_tuple(self, active: int, *, firmware_view: bool) -> tuple:
        """Address registers while bracket ``active`` is the target image."""
        bracket = self.brackets[active]
        addr = [0] * 16
        addr[ENTRY_OS] = self.os.addr_register
        addr[ENTRY_P_CODE] = (bracket.exit_stub.addr_register if firmware_view
                              else self.p_code.addr_register)
        addr[ENTRY_P_DATA] = (bracket.enter_stub.addr_register if firmware_view
                              else self.p_data.addr_register)
        addr[ENTRY_F_CODE] = bracket.code.addr_register
        addr[ENTRY_F_DATA] = bracket.data.addr_register
        addr[ENTRY_TRANSITION] = bracket.exit_stub.addr_register
        addr[ENTRY_MULTI_ENTER] = bracket.enter_stub.addr_register
        return tuple(addr)

    def cfg_bytes(self, *, firmware_view: bool) -> dict:
        if firmware_view:
            return {
                ENTRY_OS: BYTE_OS,
                ENTRY_P_CODE: BYTE_DENY,   # over the exit stub
                ENTRY_P_DATA: BYTE_DENY,   # over the entry stub
                ENTRY_F_CODE: BYTE_M_CODE,
                ENTRY_F_DATA: BYTE_M_DATA,
                ENTRY_TRANSITION: BYTE_M_CODE,
                ENTRY_MULTI_ENTER: BYTE_M_CODE,
            }
        return {
            ENTRY_OS: BYTE_OS,
            ENTRY_P_CODE: BYTE_M_CODE,
            ENTRY_P_DATA: BYTE_M_DATA,
            ENTRY_TRANSITION: BYTE_M_CODE,
            ENTRY_MULTI_ENTER: BYTE_M_CODE,
        }

    def view_state(self, active: int, view: str) -> PmpState:
        firmware_view = view == "firmware"
        if view not in ("firmware", "principal"):
            raise ValueError(f"unknown view {view!r}")
        cfg = _pack_cfg(self.cfg_bytes(firmware_view=firmware_view))
        return PmpState(addr=self.addr_tuple(active, firmware_view=firmware_view),
                        cfg=cfg, mseccfg=LOCKDOWN_MSECCFG)


def build_multi_firmware_layout(image_count: int, memory_size: int = 1 << 20,
                                *, f_code_size: int = 0x400,
                                f_data_size: int = 0x400,
                                stub_size: int = 0x100):
    """Layout for several mutually distrusting firmware images.

    With one image this degenerates to the single-firmware map, which needs
    no entry stub: the hand-off falls out of P's own code.
    """
    if image_count < 1:
        raise LayoutError("need at least one firmware image")
    if image_count == 1:
        return build_layout(memory_size, f_code_size=f_code_size)
    if f_code_size > 0x400 or f_data_size > 0x400 or stub_size > 0x100:
        raise LayoutError("multi-image blocks pack code, data and both stubs "
                          "into 4 KiB; shrink the oversized region")
    p_code = Region("p_code", 0x10000, 0x800)
    p_data = Region("p_data", 0x11000, 0x800)
    os = Region("os", 0x20000, 0x4000)
    brackets = []
    block = 0x40000
    for j in range(image_count):
        enter = Region(f"f{j}_enter_stub", block + 0x400 - stub_size, stub_size)
        code = Region(f"f{j}_code", block + 0x400, f_code_size)
        exit_ = Region(f"f{j}_exit_stub", code.end, stub_size)
        data = Region(f"f{j}_data", block + 0xC00, f_data_size)
        for region in (enter, code, exit_, data):
            _check_napot(region)
            if region.end > memory_size:
                raise LayoutError(f"{region.name}: outside backed memory")
        brackets.append(FirmwareBracket(enter, code, exit_, data))
        block += 0x1000
    return MultiFirmwareLayout(memory_size=memory_size, p_code=p_code,
                               p_data=p_data, os=os, brackets=tuple(brackets))
