"""Windowed farthest-first image selection and batch construction."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .core import PairVerdict, PipelineConfig

log = logging.getLogger(__name__)

Matcher = Callable[[int, int], PairVerdict]


class ChainBreakError(RuntimeError):
    def __init__(self, gap: GapReport):
        self.gap = gap
        super().__init__(gap.line())


@dataclass(frozen=True)
class GapReport:
    break_at: int
    tried: tuple[tuple[int, str], ...]

    def line(self) -> str:
        tried = ",".join(f"{j}:{reason}" for j, reason in self.tried)
        return f"break_at={self.break_at} tried={tried}"


@dataclass
class StitchChain:
    used_indices: list[int]
    links: list[tuple[int, int, PairVerdict]]
    attempts: list[tuple[int, int, PairVerdict]] = field(default_factory=list)
    gaps: list[GapReport] = field(default_factory=list)


@dataclass(frozen=True)
class Batch:
    """Contiguous slice of a chain; ``links[k]`` joins ``indices[k]`` and ``indices[k+1]``."""

    indices: tuple[int, ...]
    links: tuple[PairVerdict, ...]

    @property
    def first(self) -> int:
        return self.indices[0]

    @property
    def last(self) -> int:
        return self.indices[-1]


class MemoMatcher:
    """Caches verdicts per ordered pair so a pair is gated at most once."""

    def __init__(self, matcher: Matcher):
        self._matcher = matcher
        self.cache: dict[tuple[int, int], PairVerdict] = {}
        self.calls: list[tuple[int, int]] = []

    def __call__(self, i: int, j: int) -> PairVerdict:
        key = (i, j)
        if key not in self.cache:
            self.calls.append(key)
            self.cache[key] = self._matcher(i, j)
        return self.cache[key]


def build_chain(images: Sequence, cfg: PipelineConfig, matcher: Matcher, strict: bool = False) -> StitchChain:
    """Greedily link images, trying the farthest candidate in the window first.

    ``images`` only needs a length; ``matcher(i, j)`` gates positions ``i < j``.
    In strict mode a break raises :class:`ChainBreakError`; otherwise the
    chain built so far is returned with a gap report.
    """
    n = len(images)
    if n < 2:
        raise ValueError("need at least two images to build a chain")
    gate = matcher if isinstance(matcher, MemoMatcher) else MemoMatcher(matcher)
    chain = StitchChain(used_indices=[0], links=[])
    focal = 0
    last = n - 1
    while focal < last:
        tried = []
        nxt = None
        for j in range(min(focal + cfg.window, last), focal, -1):
            v = gate(focal, j)
            chain.attempts.append((focal, j, v))
            if v.accepted:
                nxt = j
                chain.links.append((focal, j, v))
                break
            tried.append((j, v.reject_reason.value))
        if nxt is None:
            gap = GapReport(focal, tuple(tried))
            chain.gaps.append(gap)
            log.warning("chain break: %s", gap.line())
            if strict:
                raise ChainBreakError(gap)
            break
        chain.used_indices.append(nxt)
        focal = nxt
    return chain


def build_batches(chain: StitchChain, batch_size: int) -> list[Batch]:
    """Cut the chain into batches sharing one boundary image."""
    idx = chain.used_indices
    if len(idx) < 2:
        raise ValueError("chain needs at least two used images")
    verdicts = [v for _, _, v in chain.links]
    starts = list(range(0, len(idx) - 1, batch_size - 1))
    bounds = [(s, min(s + batch_size - 1, len(idx) - 1)) for s in starts]
    if len(bounds) > 1 and bounds[-1][1] - bounds[-1][0] + 1 < 2:
        s, _ = bounds[-2]
        bounds[-2:] = [(s, bounds[-1][1])]
    return [Batch(tuple(idx[s:e + 1]), tuple(verdicts[s:e])) for s, e in bounds]
