# sceneslots_core/user_interaction.py
import logging
import math
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

from rich.console import Console
from rich.panel import Panel
from rich.syntax import Syntax
from rich.table import Table

from .evaluator import METRICS
from .gradcheck import GradCheckReport
from .trainer import RunResult, StepMetrics

logger = logging.getLogger(__name__)


def _fmt(value: Optional[float], digits: int = 4) -> str:
    if value is None:
        return "-"
    if isinstance(value, float) and math.isinf(value):
        return "inf"
    return f"{value:.{digits}f}"


class UserInteraction:
    """
    负责命令行的人类可读输出（横幅、配置、指标表格）。没有交互式输入：
    所有结果同时写入文件。
    """
    def __init__(self, console: Optional[Console] = None, quiet: bool = False):
        self.console = console or Console()
        self.quiet = quiet

    def show_banner(self, command: str, detail: str = "") -> None:
        if self.quiet:
            return
        body = f"[bold cyan]SceneSlots[/bold cyan] · {command}"
        if detail:
            body += f"\n{detail}"
        self.console.print(Panel(body, border_style="green"))

    def display_config(self, ini_text: str) -> None:
        """以 INI 语法高亮展示生效配置。"""
        syntax = Syntax(ini_text, "ini", theme="monokai", line_numbers=False, word_wrap=True)
        self.console.print(Panel(syntax, title="[bold magenta]生效配置[/bold magenta]", title_align="left",
                                 border_style="magenta"))

    def display_step(self, metrics: StepMetrics, total_steps: int) -> None:
        if self.quiet:
            return
        flag = " [red](跳过)[/red]" if metrics.skipped else ""
        self.console.print(
            f"[dim]{metrics.step + 1}/{total_steps}[/dim] [{metrics.stage}] loss={metrics.loss:.5f} "
            f"recon={metrics.recon:.5f} lr={metrics.lr:.2e} |g|={metrics.grad_norm:.3f}{flag}"
        )

    def display_training_summary(self, result: RunResult) -> None:
        table = Table(title="训练结束", show_header=False, title_style="bold blue")
        table.add_row("最终步数", str(result.final_step))
        table.add_row("参数校验和", result.checksum[:32])
        table.add_row("最终检查点", result.final_checkpoint or "-")
        if result.metrics:
            last = result.metrics[-1]
            table.add_row("最后一步损失", _fmt(last.loss, 6))
            skipped = sum(1 for m in result.metrics if m.skipped)
            table.add_row("跳过的步数", str(skipped))
        self.console.print(table)

    def display_eval_report(self, report: Dict[str, Any]) -> None:
        """逐指标展示种子间的均值 ± 标准差。"""
        table = Table(title=f"评估结果 ({report['num_scenes']} 个场景, 种子 {report['seeds']})", title_style="bold blue")
        table.add_column("指标", style="bold")
        table.add_column("均值", justify="right")
        table.add_column("标准差", justify="right")
        for key in METRICS:
            stats = report["aggregate"].get(key, {})
            table.add_row(key, _fmt(stats.get("mean")), _fmt(stats.get("std")))
        self.console.print(table)
        if report.get("collapsed"):
            self.console.print(f"[bold yellow]注意：{report['collapsed']} 个场景-种子组合出现注意力秩塌缩[/bold yellow]")

    def display_gradcheck(self, report: GradCheckReport) -> None:
        table = Table(title="有限差分梯度检查", title_style="bold blue")
        table.add_column("检查项", style="bold")
        table.add_column("试验", justify="right")
        table.add_column("失败", justify="right")
        table.add_column("最大相对误差", justify="right")
        for name, row in report.summary().items():
            style = "red" if row["failures"] else "green"
            table.add_row(name, str(row["trials"]), f"[{style}]{row['failures']}[/{style}]", f"{row['max_error']:.2e}")
        self.console.print(table)
        verdict = "[bold green]全部通过[/bold green]" if report.passed else f"[bold red]{len(report.failures)} 项失败[/bold red]"
        self.console.print(verdict)

    def display_outputs(self, title: str, paths: Sequence[Path]) -> None:
        if self.quiet:
            return
        listing = "\n".join(f"- {p}" for p in paths) or "(无)"
        self.console.print(Panel(listing, title=f"[bold green]{title}[/bold green]", title_align="left",
                                 border_style="green"))
        logger.info(f"{title}: 共 {len(paths)} 个文件")
