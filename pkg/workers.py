import concurrent.futures
from typing import Callable, Iterable, List, TypeVar

from config import MAX_WORKERS


T = TypeVar("T")
R = TypeVar("R")


def parallel_map(fn: Callable[[T], R], items: Iterable[T], max_workers: int = MAX_WORKERS) -> List[R]:
    """按输入顺序返回结果；max_workers <= 1 时串行执行"""
    items = list(items)
    if max_workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with concurrent.futures.ThreadPoolExecutor(max_workers=max_workers) as executor:
        return list(executor.map(fn, items))
