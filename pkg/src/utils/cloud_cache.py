"""Bounded LRU cache of preprocessed frames.

Preprocessing (voxel downsampling + covariance estimation) is pure, so a
frame only needs it once per (file, voxel size, covariance params). The
cache holds FRAME_CACHE_ENTRIES frames; the rejection sweep widens it to
one sequence with `cache_capacity(n)` so its runs share the work.
"""

from collections import OrderedDict
from contextlib import contextmanager
from typing import Any, Callable, Dict, Hashable, Iterator, TypeVar

from .consts import FRAME_CACHE_ENTRIES

T = TypeVar("T")

_CACHE: "OrderedDict[Hashable, Any]" = OrderedDict()
_CAPACITY: int = FRAME_CACHE_ENTRIES
_HITS: int = 0
_MISSES: int = 0


def get_cached(key: Hashable, build: Callable[[], T]) -> T:
    global _HITS, _MISSES
    if key in _CACHE:
        _HITS += 1
        _CACHE.move_to_end(key)
        return _CACHE[key]
    _MISSES += 1
    value = build()
    _CACHE[key] = value
    while len(_CACHE) > _CAPACITY:
        _CACHE.popitem(last=False)
    return value


def cache_stats() -> Dict[str, int]:
    return {"entries": len(_CACHE), "capacity": _CAPACITY, "hits": _HITS, "misses": _MISSES}


@contextmanager
def cache_capacity(capacity: int) -> Iterator[None]:
    """Hold up to `capacity` frames inside the block; the cache is cleared on exit."""
    global _CAPACITY
    if capacity < 1:
        raise ValueError(f"cache capacity must be >= 1, got {capacity}")
    previous = _CAPACITY
    _CAPACITY = capacity
    try:
        yield
    finally:
        _CAPACITY = previous
        clear_cache()


def clear_cache() -> None:
    global _HITS, _MISSES
    _CACHE.clear()
    _HITS = 0
    _MISSES = 0
