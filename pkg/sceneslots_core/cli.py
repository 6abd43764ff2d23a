# sceneslots_core/cli.py
# 命令行入口：子命令、全局参数与退出码

import argparse
import json
import logging
import sys
from typing import Any, Dict, List, NoReturn, Optional, Sequence

from .checkpoint import CheckpointError
from .config_manager import PRESETS, ConfigError, ConfigManager
from .editor import EditError, NoObjectFoundError
from .gradcheck import SUITES
from .logger_setup import setup_logging
from .scenegen import DatasetValidationError
from .tensor import set_precision
from .user_interaction import UserInteraction
from .workflow_controller import WorkflowController

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3

VALIDATION_ERRORS = (ConfigError, DatasetValidationError, CheckpointError, EditError, NoObjectFoundError,
                     FileNotFoundError, ValueError)


def emit_error(error: str, exit_code: int, message: str) -> None:
    """stderr 上的单行 JSON 错误。"""
    line = json.dumps({"error": error, "exit_code": exit_code, "message": message}, ensure_ascii=False)
    print(line, file=sys.stderr, flush=True)


class CliParser(argparse.ArgumentParser):
    """用法错误以退出码 1 结束，并输出单行 JSON。"""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        emit_error("UsageError", EXIT_USAGE, message)
        sys.exit(EXIT_USAGE)


def _int_list(text: str) -> List[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"需要逗号分隔的整数，得到 {text!r}") from None


def _global_flags(parser: argparse.ArgumentParser) -> None:
    # SUPPRESS 让全局参数写在子命令前后都可以
    parser.add_argument("--config", default=argparse.SUPPRESS, help="INI 配置文件路径 (也可用 SCENESLOTS_CONFIG)")
    parser.add_argument("--preset", choices=sorted(PRESETS), default=argparse.SUPPRESS, help="配置预设")
    parser.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="全局随机种子")
    parser.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="工作线程数上限")
    parser.add_argument("--log-level", dest="log_level", default=argparse.SUPPRESS, help="日志级别")


def build_parser() -> CliParser:
    parser = CliParser(prog="sceneslots", description="从单张图像学习以物体为中心的三维场景表示。")
    _global_flags(parser)
    commands = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)

    gen = commands.add_parser("gen-data", help="生成程序化多视角数据集")
    _global_flags(gen)
    gen.add_argument("--out", required=True, help="数据集输出目录")
    gen.add_argument("--num-scenes", dest="num_scenes", type=int, default=None)

    train = commands.add_parser("train", help="渐进式训练")
    _global_flags(train)
    train.add_argument("--data", required=True, help="数据集目录")
    train.add_argument("--out", default=None, help="运行工作区目录 (默认在 runs_dir 下新建)")
    train.add_argument("--resume", default=None, help="续训的检查点")
    train.add_argument("--force", action="store_true", help="忽略检查点配置摘要不一致")

    evaluate = commands.add_parser("eval", help="定量评估")
    _global_flags(evaluate)
    evaluate.add_argument("--data", required=True)
    evaluate.add_argument("--ckpt", default=None)
    evaluate.add_argument("--seeds", type=_int_list, default=None, help="逗号分隔的评估种子")
    evaluate.add_argument("--out", default=None, help="评估报告 JSON 路径")
    evaluate.add_argument("--oracle", action="store_true", help="用数据集的解析场代替模型")
    evaluate.add_argument("--force", action="store_true")

    render = commands.add_parser("render", help="新视角合成与分割图")
    _global_flags(render)
    render.add_argument("--ckpt", required=True)
    render.add_argument("--scene", required=True, help="场景目录")
    render.add_argument("--out", required=True)
    group = render.add_mutually_exclusive_group()
    group.add_argument("--views", type=_int_list, default=None, help="逗号分隔的数据集相机下标")
    group.add_argument("--orbit", type=int, default=None, help="环绕视角数量")
    render.add_argument("--force", action="store_true")

    edit = commands.add_parser("edit", help="槽级场景编辑")
    _global_flags(edit)
    edit.add_argument("--ckpt", required=True)
    edit.add_argument("--scene", required=True)
    edit.add_argument("--plan", required=True, help="编辑计划 JSON")
    edit.add_argument("--out", required=True)
    edit.add_argument("--force", action="store_true")

    gradcheck = commands.add_parser("gradcheck", help="有限差分梯度检查 (float64)")
    _global_flags(gradcheck)
    gradcheck.add_argument("--module", choices=("all",) + SUITES, default="all")
    gradcheck.add_argument("--trials", type=int, default=20)

    config = commands.add_parser("config", help="配置工具")
    _global_flags(config)
    config.add_argument("action", choices=("dump",))
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Dict[str, Any]]:
    overrides: Dict[str, Dict[str, Any]] = {}
    if getattr(args, "seed", None) is not None:
        overrides.setdefault("Runtime", {})["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        overrides.setdefault("Runtime", {})["threads"] = args.threads
    if getattr(args, "log_level", None) is not None:
        overrides.setdefault("Logging", {})["level"] = args.log_level
    return overrides


def dispatch(controller: WorkflowController, args: argparse.Namespace) -> None:
    command = args.command
    if command == "gen-data":
        controller.run_gen_data(args.out, args.num_scenes)
    elif command == "train":
        controller.run_train(args.data, args.out, args.resume, args.force)
    elif command == "eval":
        controller.run_eval(args.data, args.ckpt, args.seeds, args.out, args.oracle, args.force)
    elif command == "render":
        controller.run_render(args.ckpt, args.scene, args.out, args.views, args.orbit, args.force)
    elif command == "edit":
        controller.run_edit(args.ckpt, args.scene, args.plan, args.out, args.force)
    elif command == "gradcheck":
        controller.run_gradcheck(args.module, args.trials)
    else:
        raise ValueError(f"未知命令: {command}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config_manager = ConfigManager(getattr(args, "config", None), getattr(args, "preset", None), _overrides(args))
        log_config = config_manager.get_logging_config()
        # config dump 的 stdout 只留给 INI 文本
        stream = sys.stderr if args.command == "config" else None
        setup_logging(log_config["level"], None, log_config["log_format"], stream=stream)
        set_precision(config_manager.runtime.precision)

        if args.command == "config":
            print(config_manager.dump(), end="")
            return EXIT_OK

        controller = WorkflowController(config_manager, UserInteraction())
        try:
            dispatch(controller, args)
        finally:
            controller.close()
        return EXIT_OK
    except VALIDATION_ERRORS as e:
        logger.error(f"命令 {args.command} 因输入不合法而终止: {e}")
        emit_error(type(e).__name__, EXIT_VALIDATION, str(e))
        return EXIT_VALIDATION
    except Exception as e:
        logger.critical(f"命令 {args.command} 运行失败: {e}", exc_info=True)
        emit_error(type(e).__name__, EXIT_RUNTIME, str(e))
        return EXIT_RUNTIME
