"""Command line front end: scan blobs, boot machines, run the attack suite.

Exit codes are uniform across subcommands: 0 means the security-positive
outcome (clean scan, stopped run, fully matched suite), 1 means the tool
worked and the answer is negative (rejected blob, stalled or breached run,
mismatched suite), 2 means the invocation itself failed (missing files,
malformed config). Everything is deterministic: the same inputs produce the
same bytes on stdout.
"""

import argparse
import json
import os
import sys

from .harness import (
    TraceFormatError,
    VerdictKind,
    builtin_suite,
    evaluate,
    run_scenario,
    run_suite,
)
from .hart import RunOutcome
from .layout import LayoutError, build_layout
from .monitor import Machine, write_trace
from .program import ProgramError, generate_system
from .scanner import verify_firmware


class ConfigError(Exception):
    pass


_LAYOUT_KEYS = {"memory_size", "base", "p_code_size", "f_code_size",
                "transition_size", "p_data_size", "f_data_size", "os_size",
                "enclave_count", "enclave_size"}
_MACHINE_KEYS = {"os_variant", "f_variant", "enclave_variants",
                 "vulnerable_transition", "skip_scan"}
_CONFIG_KEYS = _MACHINE_KEYS | {"layout", "scenario", "firmware_blob",
                                "firmware_handler_offset", "timer_at"}


def load_config(path):
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            config = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(config, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(config) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    layout_part = config.get("layout", {})
    if not isinstance(layout_part, dict):
        raise ConfigError("config 'layout' must be an object")
    unknown = set(layout_part) - _LAYOUT_KEYS
    if unknown:
        raise ConfigError(f"unknown layout keys: {sorted(unknown)}")
    return config


def build_config_layout(config):
    """The layout a config describes. P's code region defaults to the size
    the generated monitor needs."""
    params = {"p_code_size": 0x1000, **config.get("layout", {})}
    enclave_variants = config.get("enclave_variants", ())
    params.setdefault("enclave_count", len(enclave_variants))
    try:
        return build_layout(**params)
    except (LayoutError, TypeError) as exc:
        raise ConfigError(f"layout rejected: {exc}") from exc


def _machine_kwargs(config):
    kwargs = {k: config[k] for k in _MACHINE_KEYS if k in config}
    if "enclave_variants" in kwargs:
        kwargs["enclave_variants"] = tuple(kwargs["enclave_variants"])
    return kwargs


def _emit(payload, fmt):
    if fmt == "json":
        json.dump(payload, sys.stdout, indent=2, sort_keys=True)
        sys.stdout.write("\n")


def _emit_rows(rows, fmt):
    if fmt == "text":
        for row in rows:
            sys.stdout.write("\t".join(str(c) for c in row) + "\n")


# --- scan -------------------------------------------------------------------


def cmd_scan(args):
    try:
        with open(args.blob, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    config = load_config(args.config)
    layout = build_config_layout(config)
    if len(blob) > layout.f_code.size:
        print(f"error: blob is {len(blob)} bytes; the firmware region holds "
              f"{layout.f_code.size}", file=sys.stderr)
        return 2
    padded = blob.ljust(layout.f_code.size, b"\x00")
    report = verify_firmware(padded, layout.spentry_offset,
                             expected_size=layout.f_code.size)
    _emit(report.to_json_dict(), args.format)
    rows = [("accepted", report.accepted)]
    rows += [("finding", f"{f.offset:#x}", f.mnemonic, f.sensitivity.name)
             for f in report.findings]
    rows += [("structural", err) for err in report.structural_errors]
    _emit_rows(rows, args.format)
    return 0 if report.accepted else 1


# --- run --------------------------------------------------------------------


def _build_machine(config, layout, hazard_window):
    kwargs = _machine_kwargs(config)
    if "firmware_blob" in config:
        try:
            with open(config["firmware_blob"], "rb") as fh:
                f_image = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read firmware blob: {exc}") from exc
        images = generate_system(
            layout,
            f_image=f_image,
            f_handler_offset=config.get("firmware_handler_offset", 0),
            os_variant=kwargs.get("os_variant", "nominal"),
            enclave_variants=kwargs.get("enclave_variants", ()),
            vulnerable_transition=kwargs.get("vulnerable_transition", False))
        return Machine(layout, images=images,
                       skip_scan=kwargs.get("skip_scan", False),
                       hazard_window=hazard_window)
    return Machine(layout, hazard_window=hazard_window, **kwargs)


def cmd_run(args):
    config = load_config(args.config)
    scenario_name = args.scenario or config.get("scenario")
    machine = None

    if scenario_name is not None:
        by_name = {s.name: s for s in builtin_suite()}
        if scenario_name not in by_name:
            raise ConfigError(f"unknown scenario {scenario_name!r} "
                              f"(see attack-suite --list)")
        scenario = by_name[scenario_name]
        need = len(scenario.config.get("enclave_variants", ()))
        layout = build_config_layout(
            {"layout": {"enclave_count": need, **config.get("layout", {})}})
        if len(layout.enclaves) < need:
            raise ConfigError(f"scenario {scenario_name!r} needs {need} "
                              f"enclave regions, layout has "
                              f"{len(layout.enclaves)}")
        result = run_scenario(scenario, layout=layout,
                              hazard_window=args.hazard_window)
        run, verdict = result.run, result.verdict
    else:
        layout = build_config_layout(config)
        machine = _build_machine(config, layout, args.hazard_window)
        timer_at = (args.timer_at if args.timer_at is not None
                    else config.get("timer_at"))
        run = machine.run(max_steps=args.max_steps, timer_at=timer_at)
        verdict = evaluate(machine, run)

    payload = {
        "config": {**{k: v for k, v in config.items() if k != "layout"},
                   "layout": layout.to_json_dict()},
        "refused": run.refused,
        "outcome": run.outcome.name.lower() if run.outcome else None,
        "steps": run.steps,
    }
    payload.update(verdict.to_json_dict())
    if scenario_name is not None:
        payload["scenario"] = scenario_name
    if args.trace is not None:
        write_trace(run, args.trace)
        payload["trace_path"] = args.trace
    if machine is not None and run.outcome is RunOutcome.STOPPED:
        payload["results"] = {name: machine.read_result(name)
                              for name in machine.images.os_slots}
    if args.figures is not None and not run.refused:
        from . import report
        payload["figures"] = report.render_all_run_figures(
            run, layout, args.figures)

    _emit(payload, args.format)
    rows = [(k, payload[k]) for k in ("refused", "outcome", "verdict", "steps")
            if k in payload]
    if "mechanism" in payload:
        rows.append(("mechanism", payload["mechanism"]))
    _emit_rows(rows, args.format)

    if run.refused or verdict.kind is VerdictKind.BREACH:
        return 1
    return 0 if run.outcome is RunOutcome.STOPPED else 1


# --- attack-suite -------------------------------------------------------------


def cmd_attack_suite(args):
    if args.list:
        for scenario in builtin_suite():
            print(f"{scenario.name}\t{scenario.description}")
        return 0
    config = load_config(args.config)
    bad = _MACHINE_KEYS & (set(config) - {"vulnerable_transition"})
    if bad:
        raise ConfigError(f"suite scenarios pick their own machines; "
                          f"config keys {sorted(bad)} do not apply")
    layout = None
    if "layout" in config:
        layout = build_config_layout(
            {"layout": {"enclave_count": 2, **config["layout"]}})
    overlay = {}
    if args.vulnerable_ordering or config.get("vulnerable_transition"):
        overlay["vulnerable_transition"] = True

    results = run_suite(layout=layout, hazard_window=args.hazard_window,
                        only=args.only, overlay=overlay or None)
    if args.only and not results:
        raise ConfigError(f"unknown scenario {args.only!r}")

    rows = []
    payload = []
    for result in results:
        d = result.to_json_dict()
        if args.trace_dir is not None:
            os.makedirs(args.trace_dir, exist_ok=True)
            trace_path = os.path.join(args.trace_dir,
                                      f"{result.scenario.name}.ndjson")
            write_trace(result.run, trace_path)
            d["trace_path"] = trace_path
        payload.append(d)
        rows.append((d["name"], d["verdict"], d.get("mechanism", "-"),
                     d["steps"], "ok" if d["matched"] else "UNEXPECTED"))

    if args.figures is not None:
        from . import report
        fig_layout = layout or build_config_layout(
            {"layout": {"enclave_count": 2}})
        figure_paths = report.render_all_suite_figures(
            results, fig_layout, args.figures)
        print("\n".join(f"figure\t{p}" for p in figure_paths),
              file=sys.stderr)

    _emit(payload, args.format)
    _emit_rows(rows, args.format)

    all_matched = all(r.matched for r in results)
    no_breach = all(r.verdict.kind is not VerdictKind.BREACH for r in results)
    return 0 if (all_matched and no_breach) else 1


# --- argument plumbing ---------------------------------------------------------


def _add_common(parser):
    parser.add_argument("--format", choices=("json", "text"), default="text",
                        help="report format (default: text, tab-delimited)")
    parser.add_argument("--config", metavar="FILE",
                        help="JSON config with layout and machine settings")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sallyport",
        description="Simulate and verify machine-mode compartment isolation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_scan = sub.add_parser("scan", help="vet a firmware blob for admission")
    p_scan.add_argument("blob", help="raw little-endian RV64 code image")
    _add_common(p_scan)
    p_scan.set_defaults(fn=cmd_scan)

    p_run = sub.add_parser("run", help="boot one machine and run it")
    _add_common(p_run)
    p_run.add_argument("--scenario", metavar="NAME",
                       help="run a named suite scenario instead of the config")
    p_run.add_argument("--trace", metavar="FILE",
                       help="write the ND-JSON event trace here")
    p_run.add_argument("--figures", metavar="DIR",
                       help="render run figures into this directory")
    p_run.add_argument("--hazard-window", type=int, default=0, metavar="N",
                       help="stale-permission window after PMP writes")
    p_run.add_argument("--timer-at", type=int, metavar="CYCLE",
                       help="schedule a one-shot timer interrupt")
    p_run.add_argument("--max-steps", type=int, default=120_000)
    p_run.set_defaults(fn=cmd_run)

    p_suite = sub.add_parser("attack-suite", help="run the builtin scenarios")
    _add_common(p_suite)
    p_suite.add_argument("--only", metavar="NAME",
                         help="run a single scenario by name")
    p_suite.add_argument("--list", action="store_true",
                         help="list scenario names and exit")
    p_suite.add_argument("--hazard-window", type=int, default=0, metavar="N")
    p_suite.add_argument("--vulnerable-ordering", action="store_true",
                         help="mis-order the return path wherever a scenario "
                              "does not pin it")
    p_suite.add_argument("--trace-dir", metavar="DIR",
                         help="write one ND-JSON trace per scenario")
    p_suite.add_argument("--figures", metavar="DIR",
                         help="render suite figures into this directory")
    p_suite.set_defaults(fn=cmd_attack_suite)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ProgramError, LayoutError, TraceFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
