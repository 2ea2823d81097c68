"""DT-to-ES assignment via deferred acceptance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class IncompletePreferences(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PreferenceLists:
    dt_prefs: np.ndarray  # p^{c,b}, shape (C, B)
    es_prefs: np.ndarray  # p^{b,c}, shape (B, C)

    def __post_init__(self):
        dt = np.asarray(self.dt_prefs, dtype=float)
        es = np.asarray(self.es_prefs, dtype=float)
        if dt.ndim != 2 or es.shape != dt.shape[::-1]:
            raise IncompletePreferences(f"shapes {dt.shape} and {es.shape} do not cover all pairs")
        if not (np.isfinite(dt).all() and np.isfinite(es).all()):
            raise IncompletePreferences("preference values must be finite")
        if dt.shape[1] < dt.shape[0]:
            raise IncompletePreferences("need at least as many ESs as partial-DTs")
        object.__setattr__(self, "dt_prefs", dt)
        object.__setattr__(self, "es_prefs", es)


@dataclass(frozen=True)
class Matching:
    es_of_dt: tuple[int, ...]  # Phi(c)

    def dt_of_es(self, num_ess: int) -> list[int | None]:
        out: list[int | None] = [None] * num_ess
        for c, b in enumerate(self.es_of_dt):
            out[b] = c
        return out

    def as_assignment(self, num_ess: int) -> np.ndarray:
        x = np.zeros((len(self.es_of_dt), num_ess), dtype=np.int64)
        x[np.arange(len(self.es_of_dt)), list(self.es_of_dt)] = 1
        return x

    @classmethod
    def from_assignment(cls, x) -> "Matching":
        x = np.asarray(x)
        return cls(tuple(int(np.argmax(row)) for row in x))


def _ranking(values: np.ndarray) -> list[int]:
    # descending by value; equal values keep ascending index order
    return sorted(range(len(values)), key=lambda j: (-values[j], j))


def _es_prefers(prefs: PreferenceLists, b: int, c_new: int, c_old: int) -> bool:
    v_new, v_old = prefs.es_prefs[b, c_new], prefs.es_prefs[b, c_old]
    return v_new > v_old or (v_new == v_old and c_new < c_old)


def gale_shapley(prefs: PreferenceLists) -> Matching:
    """Partial-DTs propose; each ES holds its best offer so far."""
    C, B = prefs.dt_prefs.shape
    lists = [_ranking(prefs.dt_prefs[c]) for c in range(C)]
    nxt = [0] * C
    held: list[int | None] = [None] * B
    free = list(range(C))
    while free:
        c = free.pop(0)
        b = lists[c][nxt[c]]
        nxt[c] += 1
        cur = held[b]
        if cur is None:
            held[b] = c
        elif _es_prefers(prefs, b, c, cur):
            held[b] = c
            free.append(cur)
        else:
            free.append(c)
    es_of = [0] * C
    for b, c in enumerate(held):
        if c is not None:
            es_of[c] = b
    return Matching(tuple(es_of))


def find_blocking_pairs(prefs: PreferenceLists, matching: Matching) -> list[tuple[int, int]]:
    """Pairs (c, b) where both sides strictly prefer each other to their partners.

    An unmatched ES prefers any partial-DT to staying empty.
    """
    C, B = prefs.dt_prefs.shape
    partner = matching.dt_of_es(B)
    out = []
    for c in range(C):
        cur_b = matching.es_of_dt[c]
        for b in range(B):
            if b == cur_b:
                continue
            if not prefs.dt_prefs[c, b] > prefs.dt_prefs[c, cur_b]:
                continue
            held = partner[b]
            if held is None or prefs.es_prefs[b, c] > prefs.es_prefs[b, held]:
                out.append((c, b))
    return out
