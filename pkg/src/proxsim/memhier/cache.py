"""Set-associative tag arrays with LRU or 2-bit SRRIP replacement."""

from __future__ import annotations

from typing import Optional

from .config import Replacement

RRPV_MAX = 3
RRPV_INSERT = 2


class SetAssocCache:
    """Tag state only. Addresses are line numbers (byte address // 64).

    ``index_div`` lets several caches share one line space: the L3 slices
    use ``line // slices`` as their set index source.
    """

    def __init__(self, sets: int, ways: int, replacement: Replacement = Replacement.LRU,
                 index_div: int = 1, name: str = ""):
        if sets < 1 or ways < 1:
            raise ValueError("cache needs at least one set and one way")
        self.sets = sets
        self.ways = ways
        self.rrip = replacement is Replacement.RRIP
        self.index_div = index_div
        self.name = name
        self._sets: dict[int, dict[int, int]] = {}
        self.dirty: set[int] = set()

    def _set(self, line: int) -> dict[int, int]:
        idx = (line // self.index_div) % self.sets
        s = self._sets.get(idx)
        if s is None:
            s = self._sets[idx] = {}
        return s

    def __contains__(self, line: int) -> bool:
        return line in self._set(line)

    def __len__(self) -> int:
        return sum(len(s) for s in self._sets.values())

    def lookup(self, line: int) -> bool:
        """Probe and update replacement state on a hit."""
        s = self._set(line)
        if line not in s:
            return False
        if self.rrip:
            s[line] = 0
        else:
            del s[line]
            s[line] = 0
        return True

    def insert(self, line: int, dirty: bool = False) -> Optional[tuple[int, bool]]:
        """Fill ``line``; returns the evicted (line, was_dirty) if any."""
        s = self._set(line)
        victim = None
        if line in s:
            self.lookup(line)
        else:
            if len(s) >= self.ways:
                v = self._victim(s)
                del s[v]
                was_dirty = v in self.dirty
                self.dirty.discard(v)
                victim = (v, was_dirty)
            s[line] = RRPV_INSERT if self.rrip else 0
        if dirty:
            self.dirty.add(line)
        return victim

    def _victim(self, s: dict[int, int]) -> int:
        if not self.rrip:
            return next(iter(s))
        while True:
            for line, rrpv in s.items():
                if rrpv >= RRPV_MAX:
                    return line
            for line in s:
                s[line] += 1

    def mark_dirty(self, line: int) -> None:
        if line in self._set(line):
            self.dirty.add(line)

    def clean(self, line: int) -> bool:
        """Clear the dirty bit; returns whether it was set."""
        if line in self.dirty:
            self.dirty.discard(line)
            return True
        return False

    def invalidate(self, line: int) -> Optional[bool]:
        """Drop ``line``; returns its dirty bit, or None if it was absent."""
        s = self._set(line)
        if line not in s:
            return None
        del s[line]
        was = line in self.dirty
        self.dirty.discard(line)
        return was

    def lines(self):
        for s in self._sets.values():
            yield from s
