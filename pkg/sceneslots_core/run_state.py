# sceneslots_core/run_state.py
import json
import logging
import uuid
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from .config_manager import ConfigManager

logger = logging.getLogger(__name__)


class RunState:
    """
    管理一次运行的工作区：训练日志 (JSONL)、检查点、快照、报告与归档清单。
    """
    TRAIN_LOG_FILENAME = "train_log.jsonl"
    CONFIG_FILENAME = "config.ini"
    CHECKPOINT_DIR = "checkpoints"
    SNAPSHOT_DIR = "snapshots"
    REPORT_FILENAME = "eval_report.json"
    ARCHIVE_MANIFEST_FILENAME = "archive_manifest.txt"

    COARSE_FINAL_CHECKPOINT = "coarse_final.ckpt"
    FINAL_CHECKPOINT = "final.ckpt"
    PERIODIC_CHECKPOINT_TEMPLATE = "step_{step:08d}.ckpt"

    def __init__(self, config_manager: ConfigManager):
        self.config_manager = config_manager
        self.runs_root_dir = Path(config_manager.paths.runs_dir)
        self.current_workspace: Optional[Path] = None
        self.run_name: Optional[str] = None
        logger.info(f"RunState 初始化，运行根目录: {self.runs_root_dir}")

    def initialize_workspace(self, prefix: str = "run", path: Optional[Path] = None) -> Path:
        """
        创建工作区。给定 path 时直接使用；否则在 runs_dir 下创建，配置了 run_name 时使用它
        （已存在则复用，便于续训），否则按时间戳加短 uuid 生成唯一名字。
        """
        configured = self.config_manager.paths.run_name
        if path is not None:
            self.current_workspace = Path(path)
            self.run_name = self.current_workspace.name
        else:
            if configured:
                self.run_name = configured
            else:
                timestamp = datetime.now().strftime("%Y%m%d%H%M%S")
                self.run_name = f"{prefix}_{timestamp}_{str(uuid.uuid4())[:8]}"
            self.current_workspace = self.runs_root_dir / self.run_name
        try:
            self.current_workspace.mkdir(parents=True, exist_ok=True)
            (self.current_workspace / self.CHECKPOINT_DIR).mkdir(exist_ok=True)
            (self.current_workspace / self.SNAPSHOT_DIR).mkdir(exist_ok=True)
            (self.current_workspace / self.CONFIG_FILENAME).write_text(self.config_manager.dump(), encoding="utf-8")
            logger.info(f"成功创建运行工作区: {self.current_workspace}")
            return self.current_workspace
        except OSError as e:
            logger.error(f"创建运行工作区 {self.current_workspace} 失败: {e}")
            raise

    @classmethod
    def workspace_of(cls, checkpoint_path: Union[str, Path]) -> Optional[Path]:
        """检查点位于某个运行工作区的 checkpoints/ 下时返回该工作区，否则返回 None。"""
        parent = Path(checkpoint_path).resolve().parent
        if parent.name == cls.CHECKPOINT_DIR and (parent.parent / cls.CONFIG_FILENAME).is_file():
            return parent.parent
        return None

    def use_workspace(self, path: Path) -> Path:
        """使用已有的运行工作区（例如评估训练产出的检查点时）。"""
        self.current_workspace = Path(path)
        self.current_workspace.mkdir(parents=True, exist_ok=True)
        self.run_name = self.current_workspace.name
        return self.current_workspace

    def _get_workspace_path(self) -> Path:
        if not self.current_workspace:
            logger.error("运行工作区尚未初始化。请先调用 initialize_workspace()")
            raise ValueError("Workspace not initialized.")
        return self.current_workspace

    @property
    def log_file_path(self) -> Optional[Path]:
        log_file = self.config_manager.logging.log_file
        if not log_file or self.current_workspace is None:
            return None
        return self.current_workspace / log_file

    # --- 训练日志 ---

    @property
    def train_log_path(self) -> Path:
        return self._get_workspace_path() / self.TRAIN_LOG_FILENAME

    def append_log(self, record: Dict[str, Any]) -> None:
        """追加一行 JSON；每条记录都带写入时间戳。"""
        payload = dict(record)
        payload.setdefault("time", datetime.now().isoformat(timespec="milliseconds"))
        try:
            with self.train_log_path.open("a", encoding="utf-8") as f:
                f.write(json.dumps(payload, sort_keys=True, ensure_ascii=False) + "\n")
        except (OSError, TypeError) as e:
            logger.error(f"写入训练日志 {self.train_log_path} 失败: {e}")
            raise

    def load_log(self) -> List[Dict[str, Any]]:
        path = self.train_log_path
        if not path.exists():
            return []
        records = []
        with path.open("r", encoding="utf-8") as f:
            for line_number, line in enumerate(f, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as e:
                    logger.warning(f"训练日志第 {line_number} 行无法解析，已跳过: {e}")
        return records

    # --- 产物路径 ---

    def checkpoint_path(self, name: str) -> Path:
        return self._get_workspace_path() / self.CHECKPOINT_DIR / name

    def periodic_checkpoint_path(self, step: int) -> Path:
        return self.checkpoint_path(self.PERIODIC_CHECKPOINT_TEMPLATE.format(step=step))

    def snapshot_dir(self, step: int) -> Path:
        path = self._get_workspace_path() / self.SNAPSHOT_DIR / f"step_{step:08d}"
        path.mkdir(parents=True, exist_ok=True)
        return path

    def save_json(self, filename: str, payload: Dict[str, Any]) -> Path:
        file_path = self._get_workspace_path() / filename
        try:
            with file_path.open("w", encoding="utf-8") as f:
                json.dump(payload, f, indent=2, sort_keys=True, ensure_ascii=False)
            logger.info(f"已保存: {file_path}")
            return file_path
        except (OSError, TypeError) as e:
            logger.error(f"保存或序列化 {file_path} 失败: {e}")
            raise

    def save_report(self, report: Dict[str, Any]) -> Path:
        return self.save_json(self.REPORT_FILENAME, report)

    def archive_run(self) -> Path:
        """生成归档清单，列出工作区内的主要产物。"""
        workspace_path = self._get_workspace_path()
        manifest_path = workspace_path / self.ARCHIVE_MANIFEST_FILENAME
        logger.info(f"开始对运行工作区 '{workspace_path}' 进行归档...")
        try:
            with manifest_path.open("w", encoding="utf-8") as f:
                f.write("运行归档清单\n")
                f.write(f"运行名称: {self.run_name}\n")
                f.write(f"归档时间: {datetime.now().isoformat()}\n")
                f.write(f"工作区路径: {workspace_path.resolve()}\n")
                f.write(f"模型配置摘要: {self.config_manager.model_digest()}\n")
                f.write("\n--- 主要产物 ---\n")
                for artifact in sorted(workspace_path.rglob("*")):
                    if artifact == manifest_path or artifact.is_dir():
                        continue
                    f.write(f"- {artifact.relative_to(workspace_path)} ({artifact.stat().st_size} 字节)\n")
            logger.info(f"运行归档清单已生成: {manifest_path}")
            return manifest_path
        except OSError as e:
            logger.error(f"生成运行归档清单时发生错误: {e}", exc_info=True)
            raise
