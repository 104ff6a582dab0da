"""Figure rendering: view matrices, suite summaries, run timelines.

Everything draws through the Agg backend and writes PNG files; nothing here
opens a window. Each renderer returns the path it wrote.
"""

import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from matplotlib.patches import Patch

from .harness import VerdictKind, actor_at, sample_view_rows
from .layout import view_state
from .pmp import Access

_VERDICT_COLORS = {
    VerdictKind.CLEAN: "#4c9f70",
    VerdictKind.BLOCKED: "#4878a8",
    VerdictKind.UNRECOVERABLE_STALL: "#c8963e",
    VerdictKind.BREACH: "#b04a4a",
}

_ACTOR_COLORS = {
    "monitor": "#4878a8",
    "firmware": "#c8963e",
    "os": "#4c9f70",
    "enclave0": "#8e6bb0",
    "enclave1": "#b05a8e",
}


def _actor_views(layout):
    views = [("os", view_state(layout, "principal")),
             ("firmware", view_state(layout, "firmware"))]
    for k in range(len(layout.enclaves)):
        views.append((f"enclave{k}", view_state(layout, "enclave", enclave=k)))
    return views


def render_view_matrices(layout, out_dir: str) -> str:
    """One permission grid per steady view: regions down, read/write/exec
    across, green for granted."""
    views = _actor_views(layout)
    regions = list(layout.regions())
    accesses = (Access.READ, Access.WRITE, Access.EXEC)

    fig, axes = plt.subplots(1, len(views), figsize=(3.2 * len(views), 0.38 * len(regions) + 1.6),
                             squeeze=False)
    for ax, (actor, state) in zip(axes[0], views):
        rows = sample_view_rows(layout, state, actor)
        grid = np.array([[rows[(name, acc)] for acc in accesses]
                         for name in regions], dtype=float)
        ax.imshow(grid, cmap="RdYlGn", vmin=-0.25, vmax=1.25, aspect="auto")
        ax.set_xticks(range(3), ["read", "write", "exec"])
        ax.set_yticks(range(len(regions)), regions, fontsize=8)
        ax.set_title(f"{actor} view", fontsize=10)
        for spine in ax.spines.values():
            spine.set_visible(False)
    fig.suptitle("Access granted to each compartment, by view")
    fig.tight_layout()
    path = os.path.join(out_dir, "view_matrices.png")
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_suite_summary(results, out_dir: str) -> str:
    """Horizontal bars, one per scenario, colored by verdict."""
    names = [r.scenario.name for r in results]
    steps = [max(r.steps, 1) for r in results]
    colors = [_VERDICT_COLORS[r.verdict.kind] for r in results]

    fig, ax = plt.subplots(figsize=(8, 0.32 * len(results) + 1.4))
    y = np.arange(len(results))
    ax.barh(y, steps, color=colors)
    ax.set_yticks(y, names, fontsize=8)
    ax.invert_yaxis()
    ax.set_xscale("log")
    ax.set_xlabel("steps simulated")
    for i, r in enumerate(results):
        if not r.matched:
            ax.text(steps[i], i, " unexpected", va="center", fontsize=8,
                    color=_VERDICT_COLORS[VerdictKind.BREACH])
    present = {r.verdict.kind for r in results}
    ax.legend(handles=[Patch(color=_VERDICT_COLORS[k], label=k.name.lower())
                       for k in VerdictKind if k in present],
              loc="lower right", fontsize=8)
    ax.set_title("Attack suite verdicts")
    fig.tight_layout()
    path = os.path.join(out_dir, "suite_summary.png")
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_run_timeline(run, layout, out_dir: str) -> str:
    """Which compartment held the hart, cycle by cycle, with traps marked.

    Uses retire events when the trace has them and falls back to mode
    switches alone for lean traces.
    """
    execs = [(ev.cycle, actor_at(layout, ev.mode, ev.pc))
             for ev in run.events if ev.kind == "Exec"]
    if not execs:
        mode_at = []
        current = "monitor"
        for ev in run.events:
            if ev.kind == "ModeSwitch":
                mode_at.append((ev.cycle, current))
                current = "monitor" if ev.data["to"] == "M" else "os"
        if run.final is not None:
            mode_at.append((run.final.cycle, current))
        execs = mode_at

    fig, ax = plt.subplots(figsize=(9, 2.6))
    actors = sorted({a for _, a in execs})
    lanes = {a: i for i, a in enumerate(actors)}
    for actor in actors:
        cycles = [c for c, a in execs if a == actor]
        ax.scatter(cycles, [lanes[actor]] * len(cycles), s=4,
                   color=_ACTOR_COLORS.get(actor, "#777777"), marker="|")
    traps = [ev.cycle for ev in run.events if ev.kind == "Trap"]
    for c in traps:
        ax.axvline(c, color="#b04a4a", lw=0.5, alpha=0.4)
    ax.set_yticks(range(len(actors)), actors, fontsize=8)
    ax.set_xlabel("cycle")
    ax.set_title("Compartment occupancy (vertical lines: traps)")
    fig.tight_layout()
    path = os.path.join(out_dir, "run_timeline.png")
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_all_run_figures(run, layout, out_dir: str) -> list:
    os.makedirs(out_dir, exist_ok=True)
    return [render_run_timeline(run, layout, out_dir),
            render_view_matrices(layout, out_dir)]


def render_all_suite_figures(results, layout, out_dir: str) -> list:
    os.makedirs(out_dir, exist_ok=True)
    return [render_suite_summary(results, out_dir),
            render_view_matrices(layout, out_dir)]
