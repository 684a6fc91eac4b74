"""
Caching of sensor design evaluations.

Exhaustive and greedy selection visit many of the same sensor subsets.
Evaluations are stored per data set and subset so that each subset is
identified only once per run.
"""

import hashlib
import json
from typing import Any

import numpy as np
from cachetools import LRUCache

from .logging import get_logger

logger = get_logger(__name__)


def fingerprint(*arrays: Any) -> str:
    """Stable digest of numeric arrays (shape, dtype and bytes)."""
    digest = hashlib.md5()
    for array in arrays:
        data = np.ascontiguousarray(array)
        digest.update(str((data.shape, data.dtype.str)).encode())
        digest.update(data.tobytes())
    return digest.hexdigest()


class DesignCache:
    """
    LRU cache for design evaluations keyed by data fingerprint and subset.
    """

    def __init__(self, max_size: int = 4096):
        """
        Initialize design cache.

        Args:
            max_size: Maximum number of cached evaluations
        """
        self.max_size = max_size
        self.cache: LRUCache = LRUCache(maxsize=max_size)
        self.stats = {"hits": 0, "misses": 0, "sets": 0}

    def _generate_key(self, data_key: str, omega: tuple[int, ...]) -> str:
        """
        Generate a cache key from a data fingerprint and a sensor subset.

        Args:
            data_key: Fingerprint of model inputs, data and start point
            omega: Binary sensor subset

        Returns:
            Hash-based cache key
        """
        key_string = json.dumps({"data": data_key, "omega": list(omega)}, sort_keys=True)
        return hashlib.md5(key_string.encode()).hexdigest()

    def get(self, data_key: str, omega: tuple[int, ...]) -> Any | None:
        """
        Get a cached evaluation.

        Returns:
            Cached evaluation or None if not found
        """
        key = self._generate_key(data_key, omega)
        result = self.cache.get(key)
        if result is None:
            self.stats["misses"] += 1
            return None
        self.stats["hits"] += 1
        logger.debug("Design cache hit", omega=omega, key=key[:8])
        return result

    def set(self, data_key: str, omega: tuple[int, ...], value: Any) -> None:
        """Cache an evaluation."""
        if value is None:
            return
        key = self._generate_key(data_key, omega)
        self.cache[key] = value
        self.stats["sets"] += 1

    def clear(self) -> None:
        self.cache.clear()
        logger.debug("Design cache cleared")

    def get_stats(self) -> dict[str, Any]:
        """
        Get cache statistics.

        Returns:
            Dictionary with cache statistics
        """
        return {
            **self.stats,
            "size": len(self.cache),
            "hit_rate": self.stats["hits"]
            / max(1, self.stats["hits"] + self.stats["misses"]),
        }
