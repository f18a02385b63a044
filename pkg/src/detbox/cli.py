"""Command-line interface.

Subcommands: ``run`` (the full orchestration loop), ``select-config``,
``synth-cmdline``, ``capacity``, and ``plan``. Every subcommand supports
``--json`` for schema-stable machine output.

Exit codes: 0 clean, 2 configuration/input error, 3 runtime or launch
error, 4 loader timeout.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

from . import analytics, config_core, host_probe
from .config_core import (
    Arch,
    CatalogError,
    HostCaps,
    LaunchConfig,
    ObjectiveWeights,
    cfg_map,
    default_catalog_path,
    load_catalog,
    load_perf,
)
from .errors import DetboxError, UnsupportedArch
from .gateway import DEFAULT_PORT, Gateway
from .hypervisor import MockBackend, MockScript, QemuBackend, synth_cmdline
from .lifecycle import (
    GATEWAY_LINGER_SECONDS,
    LOADER_TIMEOUT_SECONDS,
    MONITOR_INTERVAL_SECONDS,
    SessionState,
    run_orchestration,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_TIMEOUT = 4

_EPILOG = """\
exit codes:
  0  clean termination
  2  configuration or input error (bad files, no feasible candidate, bad flags)
  3  runtime or launch error
  4  loader timeout (no upload arrived)
"""


@dataclass
class RunSettings:
    """Inputs binding the orchestration loop for the run subcommand."""

    port: int
    host: str
    catalog_path: Path
    perf_path: Path | None
    weights: ObjectiveWeights
    workspace_root: Path
    backend: str
    loader_timeout: float
    monitor_interval: float
    gateway_linger: float
    binary_dir: Path | None
    env_id: str | None
    cpu_limit: int
    mem_limit: int
    ui_dir: Path | None
    mock_boot_delay: float
    mock_run_seconds: float
    acknowledged_risk: bool
    json_output: bool

    def __post_init__(self) -> None:
        if not 1 <= self.port <= 65535:
            raise ValueError(f"port must be in [1, 65535], got {self.port}")


def _default_cpu_limit() -> int:
    return os.cpu_count() or 1


def _default_mem_limit() -> int:
    try:
        return os.sysconf("SC_PAGE_SIZE") * os.sysconf("SC_PHYS_PAGES")
    except (ValueError, OSError):
        return 8 * 2**30


def _weights_from_args(args: argparse.Namespace) -> ObjectiveWeights:
    return ObjectiveWeights(
        w_latency=args.w_latency, w_surface=args.w_surface, w_variance=args.w_variance
    )


def _add_weight_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--w-latency", type=float, default=1.0, help="latency weight")
    parser.add_argument("--w-surface", type=float, default=1.0, help="attack-surface weight")
    parser.add_argument("--w-variance", type=float, default=0.0, help="boot-variance weight")


def _add_catalog_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--catalog",
        type=Path,
        default=None,
        help="catalog JSON file (default: packaged catalog with placeholder weights)",
    )
    parser.add_argument(
        "--perf",
        type=Path,
        default=None,
        help="optional standalone perf table overriding the catalog's perf section",
    )


def _load_inputs(args: argparse.Namespace):
    catalog_path = args.catalog or default_catalog_path()
    catalog, perf = load_catalog(catalog_path)
    if args.perf is not None:
        perf = load_perf(args.perf)
    return catalog, perf


def _host_from_args(args: argparse.Namespace) -> HostCaps:
    if args.arch is not None or args.accel is not None:
        source = host_probe.system_probe_source()
        arch = Arch.parse(args.arch) if args.arch else host_probe.detect_arch(source)
        accel = (
            args.accel == "1" if args.accel is not None else host_probe.probe_accel(source)
        )
        return HostCaps(arch, accel, args.cpu_limit, args.mem_limit)
    return host_probe.host_capabilities(
        host_probe.system_probe_source(), args.cpu_limit, args.mem_limit
    )


def _config_to_dict(config: LaunchConfig) -> dict:
    return {
        "id": config.id,
        "qemu_binary": config.qemu_binary,
        "machine_type": config.machine_type,
        "accel": config.accel.value,
        "devices": list(config.devices),
        "network": config.network.value,
        "volume": config.volume.value,
        "display": config.display,
        "target_arch": config.target_arch.value,
        "vcpus": config.vcpus,
        "mem_bytes": config.mem_bytes,
    }


# --- subcommands ---------------------------------------------------------------

def cmd_run(args: argparse.Namespace) -> int:
    try:
        settings = RunSettings(
            port=args.port,
            host=args.host,
            catalog_path=args.catalog or default_catalog_path(),
            perf_path=args.perf,
            weights=_weights_from_args(args),
            workspace_root=args.workspace_root
            or Path(tempfile.mkdtemp(prefix="detbox-")),
            backend=args.backend,
            loader_timeout=args.loader_timeout,
            monitor_interval=args.monitor_interval,
            gateway_linger=args.linger,
            binary_dir=args.binary_dir,
            env_id=args.env,
            cpu_limit=args.cpu_limit,
            mem_limit=args.mem_limit,
            ui_dir=args.ui_dir,
            mock_boot_delay=args.mock_boot_delay,
            mock_run_seconds=args.mock_run_seconds,
            acknowledged_risk=args.i_understand_detonation_risk,
            json_output=args.json,
        )
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        catalog, perf = load_catalog(settings.catalog_path)
        if settings.perf_path is not None:
            perf = load_perf(settings.perf_path)
        host = host_probe.host_capabilities(
            host_probe.system_probe_source(), settings.cpu_limit, settings.mem_limit
        )
    except (CatalogError, UnsupportedArch, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if settings.backend == "qemu":
        if not settings.acknowledged_risk:
            print(
                "error: --backend qemu detonates untrusted code; pass "
                "--i-understand-detonation-risk to proceed",
                file=sys.stderr,
            )
            return EXIT_CONFIG
        backend = QemuBackend(binary_dir=settings.binary_dir)
    else:
        backend = MockBackend(
            MockScript(
                boot_delay=settings.mock_boot_delay,
                exit_after_seconds=settings.mock_run_seconds,
            )
        )

    gateway = Gateway(host=settings.host, port=settings.port, ui_dir=settings.ui_dir)
    try:
        session = run_orchestration(
            host,
            catalog,
            settings.weights,
            perf,
            backend,
            gateway,
            workspace_root=settings.workspace_root,
            loader_timeout=settings.loader_timeout,
            monitor_interval=settings.monitor_interval,
            gateway_linger=settings.gateway_linger,
            env_id=settings.env_id,
        )
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    snapshot = session.snapshot()
    if settings.json_output:
        print(json.dumps(snapshot, indent=2))
    else:
        for record in snapshot["transitions"]:
            print(
                f"{record['timestamp']:.3f} {snapshot['session_id']} "
                f"{record['from']} --{record['event']}--> {record['to']}"
                + (f" ({record['cause']})" if record["cause"] else "")
            )
    cause = session.cause
    if session.state is not SessionState.TERMINATED:
        return EXIT_RUNTIME
    if cause is None:
        return EXIT_OK
    if cause.startswith("loader_timeout"):
        return EXIT_TIMEOUT
    if cause.startswith("config_error"):
        return EXIT_CONFIG
    return EXIT_RUNTIME


def cmd_select_config(args: argparse.Namespace) -> int:
    try:
        catalog, perf = _load_inputs(args)
        host = _host_from_args(args)
        config = cfg_map(
            host, catalog, _weights_from_args(args), perf, env_id=args.env
        )
    except (DetboxError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.json:
        print(json.dumps(_config_to_dict(config), indent=2))
    else:
        print(f"selected: {config.id}")
        for key, value in _config_to_dict(config).items():
            if key != "id":
                print(f"  {key}: {value}")
    return EXIT_OK


def cmd_synth_cmdline(args: argparse.Namespace) -> int:
    try:
        catalog, _ = _load_inputs(args)
        config = catalog.find(args.config_id)
        cmdline = synth_cmdline(config, args.image)
    except (DetboxError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.json:
        print(json.dumps({"program": cmdline.program, "args": list(cmdline.args)}, indent=2))
    else:
        print(cmdline.as_lines())
    return EXIT_OK


def cmd_capacity(args: argparse.Namespace) -> int:
    utilization = wait = simulated = None
    try:
        query = analytics.CapacityQuery(args.arrival_rate, args.service_rate)
        utilization = analytics.mm1_utilization(query)
        wait = analytics.mm1_wait(query)
        if args.simulate:
            simulated = analytics.mm1_simulate(query, args.simulate, args.seed)
    except analytics.Unstable as exc:
        # A single server cannot keep up; provisioning across workers may still.
        if args.target_wait is None:
            print(f"unstable: {exc}", file=sys.stderr)
            return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    workers = None
    if args.target_wait is not None:
        try:
            workers = analytics.provision_for_wait(
                args.target_wait, args.arrival_rate, args.service_rate
            )
        except (analytics.Unachievable, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
    if args.json:
        print(
            json.dumps(
                {
                    "utilization": utilization,
                    "expected_wait": wait,
                    "simulated_wait": simulated,
                    "workers_needed": workers,
                },
                indent=2,
            )
        )
    else:
        if utilization is None:
            print("single server unstable: requires arrival rate < service rate")
        else:
            print(f"utilization: {utilization:.6g}")
            print(f"expected_wait: {wait:.6g}")
        if simulated is not None:
            print(f"simulated_wait: {simulated:.6g} (n={args.simulate}, seed={args.seed})")
        if workers is not None:
            print(f"workers_needed: {workers} (target wait {args.target_wait:.6g})")
    return EXIT_OK


def _evaluate_plan(document: dict) -> dict:
    report: dict = {}
    if "tti" in document:
        section = document["tti"]
        breakdown = analytics.TtiBreakdown(
            t_up=section["t_up"],
            t_cfg=section["t_cfg"],
            t_boot=section["t_boot"],
            t_handoff=section["t_handoff"],
            t_vnc=section.get("t_vnc"),
        )
        report["tti_total"] = analytics.tti_total(breakdown)
        report["tti_form"] = "five-term" if breakdown.t_vnc is not None else "four-term"
    table = None
    if "boot_table" in document:
        cells = document["boot_table"]["cells"]
        samples = {
            (Arch.parse(c["arch"]), bool(c["accel"])): tuple(c["samples"]) for c in cells
        }
        probs = None
        if all("prob" in c for c in cells):
            probs = {
                (Arch.parse(c["arch"]), bool(c["accel"])): float(c["prob"]) for c in cells
            }
        table = analytics.BootTable(samples=samples, probabilities=probs)
        if probs is not None:
            report["expected_boot"] = analytics.expected_boot(table)
    if "efficiency" in document:
        if table is None:
            raise CatalogError("$.efficiency: requires a boot_table section")
        report["efficiency"] = [
            {
                "arch": entry["arch"],
                "accel": entry["accel"],
                "ratio": analytics.efficiency_ratio(
                    table, Arch.parse(entry["arch"]), bool(entry["accel"])
                ),
            }
            for entry in document["efficiency"]
        ]
    if "risk" in document:
        section = document["risk"]
        inputs = analytics.RiskInputs(
            p_escape=section["p_escape"],
            p_reach=section["p_reach"],
            p_persist=section["p_persist"],
            p_externalized=section["p_externalized"],
            p_reattach=section["p_reattach"],
            lambda_vuln=section["lambda_vuln"],
        )
        risk = {
            "host_compromise": analytics.host_compromise_prob(inputs),
            "persistence": analytics.persistence_prob(
                inputs.p_externalized, inputs.p_reattach
            ),
        }
        if "surface" in section:
            risk["escape_bound"] = analytics.escape_bound(
                inputs.lambda_vuln, section["surface"]
            )
        report["risk"] = risk
    return report


def cmd_plan(args: argparse.Namespace) -> int:
    try:
        with open(args.input, "r", encoding="utf-8") as fh:
            document = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read plan input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        config_core._validate_against_schema(document, "plan.schema.json")
        report = _evaluate_plan(document)
    except (DetboxError, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.json:
        print(json.dumps(report, indent=2))
    else:
        if "tti_total" in report:
            print(f"tti_total: {report['tti_total']:.6g} ({report['tti_form']})")
        if "expected_boot" in report:
            print(f"expected_boot: {report['expected_boot']:.6g}")
        for entry in report.get("efficiency", ()):
            print(
                f"efficiency {entry['arch']} accel={entry['accel']}: {entry['ratio']:.6g}"
            )
        for key, value in report.get("risk", {}).items():
            print(f"risk {key}: {value:.6g}")
    return EXIT_OK


# --- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="detbox",
        description="Ephemeral hypervisor-backed detonation sessions behind a single endpoint",
        epilog=_EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="serve the loader, launch the guest, monitor, tear down")
    run.add_argument("--port", type=int, default=DEFAULT_PORT)
    run.add_argument("--host", default="127.0.0.1")
    _add_catalog_flags(run)
    _add_weight_flags(run)
    run.add_argument("--workspace-root", type=Path, default=None)
    run.add_argument("--backend", choices=("mock", "qemu"), default="mock")
    run.add_argument("--loader-timeout", type=float, default=LOADER_TIMEOUT_SECONDS)
    run.add_argument("--monitor-interval", type=float, default=MONITOR_INTERVAL_SECONDS)
    run.add_argument(
        "--linger",
        type=float,
        default=GATEWAY_LINGER_SECONDS,
        help="seconds the endpoint keeps serving the terminated route before shutdown",
    )
    run.add_argument("--binary-dir", type=Path, default=None)
    run.add_argument("--env", default=None, help="perf environment id override")
    run.add_argument("--cpu-limit", type=int, default=_default_cpu_limit())
    run.add_argument("--mem-limit", type=int, default=_default_mem_limit())
    run.add_argument("--ui-dir", type=Path, default=None, help="serve this UI bundle instead of the builtin page")
    run.add_argument("--mock-boot-delay", type=float, default=0.1)
    run.add_argument("--mock-run-seconds", type=float, default=2.0)
    run.add_argument("--i-understand-detonation-risk", action="store_true")
    run.add_argument("--json", action="store_true")
    run.set_defaults(func=cmd_run)

    select = sub.add_parser("select-config", help="map host capabilities to a launch config")
    _add_catalog_flags(select)
    _add_weight_flags(select)
    select.add_argument("--arch", choices=("x86_64", "aarch64"), default=None)
    select.add_argument("--accel", choices=("0", "1"), default=None)
    select.add_argument("--env", default=None)
    select.add_argument("--cpu-limit", type=int, default=_default_cpu_limit())
    select.add_argument("--mem-limit", type=int, default=_default_mem_limit())
    select.add_argument("--json", action="store_true")
    select.set_defaults(func=cmd_select_config)

    synth = sub.add_parser("synth-cmdline", help="print the exact hypervisor invocation")
    synth.add_argument("config_id")
    _add_catalog_flags(synth)
    synth.add_argument("--image", required=True, help="disk image path to embed")
    synth.add_argument("--json", action="store_true")
    synth.set_defaults(func=cmd_synth_cmdline)

    capacity = sub.add_parser("capacity", help="queueing capacity report")
    capacity.add_argument("--arrival-rate", type=float, required=True)
    capacity.add_argument("--service-rate", type=float, required=True)
    capacity.add_argument("--simulate", type=int, default=0, help="cross-check with N simulated jobs")
    capacity.add_argument("--seed", type=int, default=0)
    capacity.add_argument("--target-wait", type=float, default=None)
    capacity.add_argument("--json", action="store_true")
    capacity.set_defaults(func=cmd_capacity)

    plan = sub.add_parser("plan", help="evaluate timing and risk models over an input file")
    plan.add_argument("input", type=Path)
    plan.add_argument("--json", action="store_true")
    plan.set_defaults(func=cmd_plan)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        stream=sys.stdout,
        level=logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
