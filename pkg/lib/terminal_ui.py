import threading
from typing import Iterable, List, Optional

from rich.console import Group
from rich.live import Live
from rich.panel import Panel
from rich.progress import Progress, BarColumn, TextColumn, TimeElapsedColumn, SpinnerColumn, TaskID
from rich.table import Table
from rich.text import Text

from lib.extractor import ExplorationResult
from lib.model import METHOD_SYMBOLIC, EnclaveModel
from lib.verifier import ThreadStatus


class UI:
    """Live extraction display: the last finished function above a progress bar."""

    def __init__(self, total_items: int, task_desc: str = "Extracting functions..."):
        self._last: Optional[ExplorationResult] = None
        self._task_id: Optional[TaskID] = None
        self._total = total_items
        self._description = task_desc
        self._lock = threading.Lock()  # extraction workers report concurrently

        self.progress_bar = Progress(
            SpinnerColumn(), TextColumn("[progress.description]{task.description}"), BarColumn(),
            TextColumn("[progress.percentage]{task.percentage:>3.0f}%"),
            TimeElapsedColumn(),
            TextColumn("{task.completed} of {task.total} functions"),
        )
        self.status_panel = self._build_panel()
        self.live_display = Live(Group(self.status_panel, self.progress_bar), refresh_per_second=4,
                                 vertical_overflow="visible", auto_refresh=False)

    def _build_panel(self) -> Panel:
        content = Text()
        r = self._last
        if r is None:
            content.append("Waiting for first function...", style="italic dim")
        else:
            content.append("Function: ", style="bold blue")
            content.append(f"{r.function}\n")
            style = "bold green" if r.method == METHOD_SYMBOLIC else "bold yellow"
            content.append("Method:   ", style="bold blue")
            content.append(r.method, style=style)
            content.append(f"\nGraph:    {len(r.graph)} vertices, {len(r.graph.edges)} edges, "
                           f"coverage {r.coverage:.0%}, {r.paths} paths in {r.elapsed:.2f}s")
            if r.note:
                content.append(f"\nNote:     {r.note}", style="dim")
        return Panel(content, title="Last Extracted", border_style="dim", width=80)

    def __enter__(self):
        self.live_display.start(refresh=False)
        self._task_id = self.progress_bar.add_task(f"[yellow]{self._description}[/yellow]", total=self._total)
        self._refresh_display()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.live_display.stop()

    def _refresh_display(self):
        self.status_panel = self._build_panel()
        self.live_display.update(Group(self.status_panel, self.progress_bar), refresh=True)

    def update_display(self, result: ExplorationResult, advance_by: int = 1) -> None:
        if self._task_id is None: raise RuntimeError("UI not started.")
        with self._lock:
            self._last = result
            if advance_by > 0: self.progress_bar.update(self._task_id, advance=advance_by)
            self._refresh_display()


def model_table(model: EnclaveModel) -> Table:
    table = Table(title="Extracted Model", show_lines=False)
    table.add_column("Function", style="bold")
    table.add_column("Address", justify="right")
    table.add_column("Method")
    table.add_column("Vertices", justify="right")
    table.add_column("Edges", justify="right")
    table.add_column("Coverage", justify="right")
    for name in sorted(model.functions):
        fm = model.functions[name]
        style = "green" if fm.method == METHOD_SYMBOLIC else "yellow"
        table.add_row(name, f"{fm.address:#x}", f"[{style}]{fm.method}[/{style}]", str(len(fm.graph)),
                      str(len(fm.graph.edges)), f"{fm.coverage:.0%}")
    return table


def verdict_table(statuses: Iterable[ThreadStatus], title: str = "Thread Verdicts") -> Table:
    table = Table(title=title)
    table.add_column("Thread", justify="right")
    table.add_column("Verdict")
    table.add_column("Position")
    table.add_column("State")
    table.add_column("Classification")
    for s in statuses:
        style = {"trusted": "green", "untrusted": "bold red"}.get(s.verdict, "dim")
        cls = s.report.classification.value if s.report is not None else "-"
        table.add_row(str(s.thread_id), f"[{style}]{s.verdict}[/{style}]", s.position, str(s.state), cls)
    return table


def records_panel(lines: List[str], title: str) -> Panel:
    trusted = bool(lines) and lines[0].startswith("TRUSTED")
    return Panel("\n".join(lines) or "(empty)", title=title, border_style="green" if trusted else "red",
                 expand=False)
