import sys
import copy
import signal
import os
import socket
import secrets
import logging
import argparse
import threading
import time
from datetime import datetime
from typing import List, Optional, Tuple
from rich import print as rprint
from rich.panel import Panel
from rich.text import Text
import lib.transcript as transcript
from config import SETTINGS as APP_SETTINGS
from lib.attacks import SCENARIOS, Injector, UnknownScenarioError, attach, make_injector
from lib.channel import ChannelError, SocketTransport, new_reporter, receive_handshake
from lib.config_schema import AppConfig, load_config_file, parse_address
from lib.extractor import ExtractionError, extract_model
from lib.model import ModelError, load_mac_key
from lib.monitor import MonitorError, MonitorServer, format_address, list_sessions, load_model, query_status
from lib.program import ProgramError, TraceProgram, load_program
from lib.target import EnclaveHost, SimulationError, load_schedule
from lib.terminal_ui import UI, model_table, records_panel

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_REFUSED = 3

shutdown_event = threading.Event()

def setup_logger(log_dir: str = "log"):
    log_file = f"run_{datetime.now().strftime('%Y%m%d_%H%M%S')}.log"
    if not os.path.exists(log_dir): os.makedirs(log_dir, exist_ok=True)
    log_path = os.path.join(log_dir, log_file)

    fmt = logging.Formatter('%(asctime)s - %(levelname)s - [%(name)s] %(message)s')
    root_logger = logging.getLogger()
    root_logger.setLevel(logging.DEBUG)
    if not any(isinstance(h, logging.FileHandler) for h in root_logger.handlers):
        fh = logging.FileHandler(log_path, encoding='utf-8')
        fh.setFormatter(fmt)
        fh.setLevel(logging.DEBUG)
        root_logger.addHandler(fh)

    return root_logger

def signal_handler(sig, frame):
    logging.getLogger(__name__).warning(f"Shutdown signal {sig} received.")
    rprint(f"\n[bold yellow]Shutdown requested.[/] Stopping...", flush=True)
    shutdown_event.set()

def fail(main_log, message: str, code: int) -> int:
    rprint(f"[bold red]Error:[/bold red] {message}", file=sys.stderr)
    main_log.error(message)
    return code


class CLIParser(argparse.ArgumentParser):
    """argparse, but usage errors exit with the CLI's usage code."""
    def error(self, message):
        self.print_usage(sys.stderr)
        rprint(f"[bold red]Usage error:[/bold red] {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> CLIParser:
    parser = CLIParser(prog="run.py", description="Provenance monitoring for simulated enclaves.")
    parser.add_argument("--config", help="key=value file applied on top of config.py")
    parser.add_argument("--log-dir", help="directory for run_*.log files")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="build and seal the model of an IR program")
    p.add_argument("program")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--key-file")
    p.add_argument("--timeout", type=float)
    p.add_argument("--path-cap", type=int)
    p.add_argument("--loop-bound", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--force-insensitive", "--insensitive", dest="force_insensitive", action="store_true",
                   help="skip symbolic exploration")
    p.add_argument("--no-ui", action="store_true")

    p = sub.add_parser("monitor", help="serve a model to target connections")
    p.add_argument("--model")
    p.add_argument("--key-file")
    p.add_argument("--listen")
    p.add_argument("--status-listen")
    p.add_argument("--timeout", type=float)
    p.add_argument("--queue-capacity", type=int)
    p.add_argument("--stop-untrusted", action="store_true", help="close a session once it is untrusted")

    for name, help_text in (("target", "run an IR program against a monitor"),
                            ("attack", "run an attack scenario and check the monitor's verdict")):
        p = sub.add_parser(name, help=help_text)
        if name == "attack":
            p.add_argument("scenario", help=", ".join(sorted(SCENARIOS)))
        p.add_argument("program")
        p.add_argument("--monitor")
        p.add_argument("--threads", type=int)
        p.add_argument("--schedule")
        p.add_argument("--transcript", help="write the decrypted action log here")
        p.add_argument("--dummies", action="store_true", help="send random dummy packets")
        if name == "target":
            p.add_argument("--scenario")
        else:
            p.add_argument("--status")
            p.add_argument("--wait", type=float, default=15.0, help="seconds to wait for the verdict")

    p = sub.add_parser("status", help="query a running monitor")
    p.add_argument("--status")
    p.add_argument("--session", type=int)
    p.add_argument("--thread", type=int)
    return parser


def resolve_settings(args) -> AppConfig:
    settings = copy.deepcopy(APP_SETTINGS)
    if args.config:
        load_config_file(args.config, settings)
    overrides = {
        "extract": [("timeout", settings.extractor, "timeout"), ("path_cap", settings.extractor, "path_cap"),
                    ("loop_bound", settings.extractor, "loop_bound"), ("workers", settings.extractor, "workers"),
                    ("key_file", settings.monitor, "key_file")],
        "monitor": [("model", settings.monitor, "model_path"), ("key_file", settings.monitor, "key_file"),
                    ("listen", settings.monitor, "listen"), ("status_listen", settings.monitor, "status_listen"),
                    ("timeout", settings.monitor, "timeout"), ("queue_capacity", settings.monitor, "queue_capacity")],
        "target": [("monitor", settings.target, "monitor"), ("threads", settings.target, "threads"),
                   ("schedule", settings.target, "schedule_file"), ("transcript", settings.target, "transcript")],
        "status": [("status", settings.monitor, "status_listen")],
    }
    overrides["attack"] = overrides["target"] + [("status", settings.monitor, "status_listen")]
    for arg, section, field_name in overrides[args.command]:
        value = getattr(args, arg, None)
        if value is not None:
            setattr(section, field_name, value)
    if getattr(args, "force_insensitive", False): settings.extractor.force_insensitive = True
    if getattr(args, "stop_untrusted", False): settings.monitor.keep_reading_untrusted = False
    if getattr(args, "dummies", False): settings.channel.dummy_packets = True
    if args.log_dir: settings.monitor.log_dir = args.log_dir
    settings.validate_fully()
    return settings


def ensure_key_file(path: str, main_log) -> None:
    if os.path.exists(path): return
    with open(path, "w", encoding="utf-8") as f:
        f.write(secrets.token_hex(32) + "\n")
    os.chmod(path, 0o600)
    main_log.info(f"Created model key file '{path}'.")
    rprint(f"[yellow]Created new model key file[/yellow] '{path}'.")


# --- Subcommands ---

def cmd_extract(args, settings: AppConfig, main_log) -> int:
    cfg = settings.extractor
    program = load_program(args.program)
    ensure_key_file(settings.monitor.key_file, main_log)
    options = dict(timeout=cfg.timeout, path_cap=cfg.path_cap, loop_bound=cfg.loop_bound,
                   force_insensitive=cfg.force_insensitive, workers=cfg.workers)
    if args.no_ui:
        model = extract_model(program, **options)
    else:
        with UI(total_items=len(program.functions)) as term_ui:
            model = extract_model(program, progress=term_ui.update_display, **options)
    model.save(args.output, load_mac_key(settings.monitor.key_file))
    rprint(model_table(model))
    rprint(f"[green]Model written to[/green] '{args.output}'.")
    main_log.info(f"Model of '{args.program}' written to '{args.output}'.")
    return EXIT_OK


def display_monitor_config(settings: AppConfig, main_log) -> None:
    cfg = settings.monitor
    main_log.info("--- Configuration ---")
    main_log.info(f"Model:          '{cfg.model_path}'")
    main_log.info(f"Listen:         {cfg.listen}")
    main_log.info(f"Status:         {cfg.status_listen}")
    main_log.info(f"Timeout:        {cfg.timeout}s, queue capacity {cfg.queue_capacity}")
    main_log.info("--------------------")

    config_text = Text()
    config_text.append("Model:          ", style="bold blue")
    config_text.append(f"'{cfg.model_path}'\n")
    config_text.append("Listen:         ", style="bold blue")
    config_text.append(f"{cfg.listen}\n")
    config_text.append("Status:         ", style="bold magenta")
    config_text.append(f"{cfg.status_listen}\n")
    config_text.append("Timeout:        ", style="dim")
    config_text.append(f"{cfg.timeout}s, queue {cfg.queue_capacity}\n", style="dim")
    config_text.append("After untrusted:", style="bold green" if cfg.keep_reading_untrusted else "bold red")
    config_text.append(" keep logging" if cfg.keep_reading_untrusted else " close session")
    rprint(Panel(config_text, title="Monitor Configuration", border_style="green", expand=False))


def cmd_monitor(args, settings: AppConfig, main_log, shutdown: threading.Event) -> int:
    cfg = settings.monitor
    if not cfg.model_path:
        return fail(main_log, "No model given (--model or monitor.model_path).", EXIT_USAGE)
    model = load_model(cfg.model_path, cfg.key_file)
    display_monitor_config(settings, main_log)
    server = MonitorServer(model, parse_address(cfg.listen), parse_address(cfg.status_listen),
                           timeout=cfg.timeout, queue_capacity=cfg.queue_capacity,
                           keep_reading_untrusted=cfg.keep_reading_untrusted)
    with server:
        rprint(f"[green]Monitoring[/green] on {format_address(server.address)} "
               f"(status {format_address(server.status_address)}). Ctrl+C to stop.")
        while not shutdown.wait(0.2):
            pass
    rprint("\n[bold]--- Sessions ---[/bold]")
    for session in server.sessions.values():
        rprint(session.summary())
    return EXIT_OK


def run_remote(program: TraceProgram, settings: AppConfig, injector: Optional[Injector] = None):
    """Connects to a monitor, runs the workload and closes; returns (results, local address, host)."""
    cfg = settings.target
    schedule = load_schedule(cfg.schedule_file) if cfg.schedule_file else None
    k_max, t_max = settings.dummy_params
    sock = socket.create_connection(parse_address(cfg.monitor), timeout=settings.channel.timeout)
    try:
        local = format_address(sock.getsockname()[:2])
        key = receive_handshake(sock, settings.channel.timeout)
        if injector is not None:
            channel = attach(injector, SocketTransport(sock), key, settings.channel.timeout)
        else:
            channel = new_reporter(SocketTransport(sock), key, settings.channel.timeout)
        host = EnclaveHost(program, channel, emit_hook=injector.on_emit if injector else None,
                           max_exception_retries=cfg.max_exception_retries, max_call_depth=cfg.max_call_depth,
                           dummy_k_max=k_max, dummy_t_max=t_max)
        results = host.run_workload(cfg.threads, schedule)
        try: sock.shutdown(socket.SHUT_WR)
        except OSError: pass
    finally:
        sock.close()
    if cfg.transcript:
        transcript.save(cfg.transcript, host.transcript)
    return results, local, host


def report_results(results, main_log) -> None:
    for tid, runs in results.items():
        for r in runs:
            if r.ok:
                main_log.info(f"Thread {tid}: ECALL {r.index} returned {r.value}")
            else:
                main_log.warning(f"Thread {tid}: ECALL {r.index} failed: {r.error}")
                rprint(f"[yellow]Thread {tid}:[/yellow] ECALL {r.index} failed: {r.error}")
    done = sum(1 for runs in results.values() for r in runs if r.ok)
    rprint(f"Completed ECALLs: [green]{done}[/green] across {len(results)} thread(s).")


def cmd_target(args, settings: AppConfig, main_log) -> int:
    program = load_program(args.program)
    injector = make_injector(args.scenario, program) if args.scenario else None
    results, local, host = run_remote(program, settings, injector)
    main_log.info(f"Target run from {local}: {len(host.transcript)} actions, {host.dummies} dummies.")
    report_results(results, main_log)
    return EXIT_OK


def wait_for_session(status: Tuple[str, int], peer: str, wait: float) -> Optional[str]:
    deadline = time.monotonic() + wait
    while time.monotonic() < deadline:
        for entry in list_sessions(status):
            if entry.get("peer") == peer and entry.get("state") == "closed":
                return entry["id"]
        time.sleep(0.1)
    return None


def cmd_attack(args, settings: AppConfig, main_log) -> int:
    program = load_program(args.program)
    injector = make_injector(args.scenario, program)
    expected = injector.scenario.expected.value
    results, local, _ = run_remote(program, settings, injector)
    report_results(results, main_log)
    if not injector.fired:
        return fail(main_log, f"Scenario '{args.scenario}' found no injection point in '{args.program}'.",
                    EXIT_REFUSED)
    status = parse_address(settings.monitor.status_listen)
    session = wait_for_session(status, local, args.wait)
    if session is None:
        return fail(main_log, f"Monitor never closed the session of {local}.", EXIT_IO)
    lines = query_status(status, int(session))
    rprint(records_panel(lines, f"Session {session}"))
    head = lines[0].split() if lines else []
    observed = head[1] if len(head) > 1 and head[0] == "UNTRUSTED" else "trusted"
    main_log.info(f"Attack '{args.scenario}': expected {expected}, observed {observed}.")
    if observed != expected:
        return fail(main_log, f"Expected classification '{expected}', monitor reported '{observed}'.",
                    EXIT_REFUSED)
    rprint(f"[green]Detected:[/green] {args.scenario} classified as {observed}.")
    return EXIT_OK


def cmd_status(args, settings: AppConfig, main_log) -> int:
    status = parse_address(settings.monitor.status_listen)
    if args.session is None:
        if args.thread is not None:
            return fail(main_log, "--thread needs --session.", EXIT_USAGE)
        lines = [f"SESSION {s['id']} peer={s.get('peer')} state={s.get('state')} verdict={s.get('verdict')}"
                 for s in list_sessions(status)]
        rprint(records_panel(lines, "Sessions") if lines else "[dim]No sessions yet.[/dim]")
        return EXIT_OK
    lines = query_status(status, args.session, args.thread)
    rprint(records_panel(lines, f"Session {args.session}"))
    if lines and lines[0].startswith("ERR"):
        return fail(main_log, lines[0], EXIT_USAGE)
    return EXIT_OK


def cli_main(argv: Optional[List[str]] = None, shutdown: Optional[threading.Event] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings = resolve_settings(args)
    except (OSError, ValueError) as e:
        rprint(f"[bold red]Configuration error:[/bold red] {e}", file=sys.stderr)
        return EXIT_USAGE if isinstance(e, ValueError) else EXIT_IO
    setup_logger(settings.monitor.log_dir)
    main_log = logging.getLogger(__name__)
    main_log.info(f"==================== {args.command} starting ====================")

    if shutdown is None:
        shutdown = shutdown_event
        if threading.current_thread() is threading.main_thread():
            signal.signal(signal.SIGINT, signal_handler)
            signal.signal(signal.SIGTERM, signal_handler)

    try:
        if args.command == "extract": return cmd_extract(args, settings, main_log)
        if args.command == "monitor": return cmd_monitor(args, settings, main_log, shutdown)
        if args.command == "target": return cmd_target(args, settings, main_log)
        if args.command == "attack": return cmd_attack(args, settings, main_log)
        return cmd_status(args, settings, main_log)
    except UnknownScenarioError as e:
        return fail(main_log, str(e), EXIT_USAGE)
    except (ModelError, ExtractionError, ProgramError) as e:
        return fail(main_log, f"Refused: {e}", EXIT_REFUSED)
    except (MonitorError, ChannelError, SimulationError, OSError) as e:
        return fail(main_log, f"I/O failure: {e}", EXIT_IO)
    finally:
        main_log.info(f"==================== {args.command} finished ====================")

if __name__ == "__main__":
    sys.exit(cli_main())
