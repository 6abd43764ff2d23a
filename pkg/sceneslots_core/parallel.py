# sceneslots_core/parallel.py
# 执行策略模块：渲染分块、场景生成与评估的并行执行

import logging
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Sequence, TypeVar

from .tensor import no_grad

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

# --- 策略接口定义 ---

class ExecutionStrategy(ABC):
    """
    执行策略的抽象基类。结果总是按输入顺序返回，
    调用方按固定顺序归约，所以线程数不影响数值结果。
    """
    workers: int = 1

    @abstractmethod
    def map(self, fn: Callable[[T], R], items: Sequence[T]) -> List[R]:
        pass

    def shutdown(self) -> None:
        pass

# --- 具体策略实现 ---

class SequentialStrategy(ExecutionStrategy):
    """在当前线程依次执行；唯一允许记录计算图的策略。"""

    def map(self, fn: Callable[[T], R], items: Sequence[T]) -> List[R]:
        return [fn(item) for item in items]


def _without_grad(fn: Callable[[T], R]) -> Callable[[T], R]:
    def run(item: T) -> R:
        # 梯度开关是线程私有的，工作线程里要显式关闭
        with no_grad():
            return fn(item)
    return run


class ThreadPoolStrategy(ExecutionStrategy):
    """
    线程池执行。任务在 no_grad 下运行（磁带是线程私有的，跨线程的计算图无法回传）。
    numpy 的矩阵运算会释放 GIL，因此多线程对渲染有效。
    """
    def __init__(self, workers: int):
        if workers < 1:
            raise ValueError(f"线程数必须 >= 1，得到 {workers}")
        self.workers = workers
        self._executor = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="sceneslots")
        logger.info(f"ThreadPoolStrategy 初始化，工作线程数: {workers}")

    def map(self, fn: Callable[[T], R], items: Sequence[T]) -> List[R]:
        return list(self._executor.map(_without_grad(fn), items))

    def shutdown(self) -> None:
        self._executor.shutdown(wait=True)


def make_strategy(threads: int) -> ExecutionStrategy:
    if threads <= 1:
        return SequentialStrategy()
    return ThreadPoolStrategy(threads)
