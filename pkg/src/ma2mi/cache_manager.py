"""
Cache Manager

This module provides an LRU in-memory cache and the decoded-frame cache built on
it, so frames shared by many sampled pairs are read from disk once per process.
"""

from collections import OrderedDict
from pathlib import Path
from typing import Any, Generic, Hashable, Optional, Tuple, TypeVar

import numpy as np
import torch
from loguru import logger
from PIL import Image

from . import config

T = TypeVar('T')


class LRUCache(Generic[T]):
    """
    Least Recently Used (LRU) cache with maximum size limit.

    Evicts the least recently used item once the cache is full, which bounds
    memory during long training runs.
    """

    def __init__(self, max_size: int = 200):
        """
        Initialize LRU cache.

        Parameters:
        -----------
        max_size : int
            Maximum number of items to keep in cache (default: 200)
        """
        self.cache: OrderedDict[Hashable, T] = OrderedDict()
        self.max_size = max_size
        self.hits = 0
        self.misses = 0

    def get(self, key: Hashable, default: Optional[T] = None) -> Optional[T]:
        """
        Get value from cache, moving it to end (most recently used).

        Parameters:
        -----------
        key : hashable
            Cache key
        default : any, optional
            Default value if key not found

        Returns:
        --------
        any
            Cached value or default
        """
        if key in self.cache:
            self.cache.move_to_end(key)
            self.hits += 1
            return self.cache[key]
        self.misses += 1
        return default

    def set(self, key: Hashable, value: T) -> None:
        """
        Set value in cache.

        Parameters:
        -----------
        key : hashable
            Cache key
        value : any
            Value to cache
        """
        if key in self.cache:
            self.cache.move_to_end(key)
        elif self.max_size > 0 and len(self.cache) >= self.max_size:
            self.cache.popitem(last=False)

        if self.max_size > 0:
            self.cache[key] = value

    def __contains__(self, key: Hashable) -> bool:
        return key in self.cache

    def __len__(self) -> int:
        return len(self.cache)

    def clear(self) -> None:
        """Clear all cached items and counters."""
        self.cache.clear()
        self.hits = 0
        self.misses = 0


def decode_frame(path: Path, image_size: int) -> torch.Tensor:
    """
    Decode one frame file to a float tensor.

    Parameters:
    -----------
    path : Path
        PNG (or any PIL-readable) image
    image_size : int
        Square output size; frames of another size are resized bilinearly

    Returns:
    --------
    torch.Tensor
        (3, image_size, image_size) tensor with values in [0, 1]
    """
    with Image.open(path) as img:
        img = img.convert("RGB")
        if img.size != (image_size, image_size):
            img = img.resize((image_size, image_size), Image.Resampling.BILINEAR)
        array = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(array.copy()).permute(2, 0, 1).contiguous()


class FrameCache:
    """
    Process-local cache of decoded frames keyed by (path, image_size).

    Loading is a pure function of the file, so each data-loader worker can
    keep its own instance without coordination.
    """

    def __init__(self, max_size: int = config.FRAME_CACHE_SIZE):
        """
        Parameters:
        -----------
        max_size : int
            Maximum decoded frames kept in memory (0 disables caching)
        """
        self.memory_cache: LRUCache[torch.Tensor] = LRUCache(max_size=max_size)

    def load(self, path: Path, image_size: int) -> torch.Tensor:
        """Return the decoded frame, reading it from disk on a miss."""
        key: Tuple[Any, ...] = (str(path), image_size)
        frame = self.memory_cache.get(key)
        if frame is None:
            frame = decode_frame(path, image_size)
            self.memory_cache.set(key, frame)
        return frame

    def stats(self) -> dict:
        total = self.memory_cache.hits + self.memory_cache.misses
        hit_rate = self.memory_cache.hits / total if total else 0.0
        logger.debug(f"Frame cache: {len(self.memory_cache)} frames, hit rate {hit_rate:.2%}")
        return {"size": len(self.memory_cache), "hits": self.memory_cache.hits,
                "misses": self.memory_cache.misses}
