"""Element-count memory accounting.

The ledger tracks live float64 element counts by category and remembers the
peak of each category as well as the peak of the total. Granularity is the
documented convention used by the whole package: an array is tracked iff it
survives a layer-step or phase boundary (embedding buffers, similarity
matrices, layer outputs, tape entries, gradient flows, gradient packets,
gathered weight copies). Sub-expression temporaries that die inside a single
layer step (centered values, masks, norm stats) are not tracked; they add a
bounded constant of at most a few layer widths and no B/M/core scaling.

The analytic peak models in twotower.shardsim walk the same convention, and
the test suite asserts instrumented peak == analytic peak exactly, so any
buffer that outlives its documented lifetime shows up as a mismatch.

Categories in use:
  embed    X, Y, dX, dY batch embedding buffers
  sim      similarity matrix A and its gradient dA
  act      layer outputs, tape entries, backward gradient flows
  grad     per-microbatch gradient packets (weight-shaped)
  replica  per-replica gradients held while estimating variance
  gathered transient full-weight copies assembled from shards
"""

from __future__ import annotations

from collections import defaultdict
from contextlib import contextmanager


class MemoryLedger:
    __slots__ = ("live", "category_peak", "total_live", "total_peak",
                 "gather_events", "gather_elements", "gathered_names")

    def __init__(self):
        self.reset()

    def reset(self):
        self.live = defaultdict(int)
        self.category_peak = defaultdict(int)
        self.total_live = 0
        self.total_peak = 0
        self.gather_events = 0
        self.gather_elements = 0
        self.gathered_names = defaultdict(int)

    def alloc(self, category: str, nelems: int):
        if nelems < 0:
            raise ValueError("alloc size must be >= 0")
        self.live[category] += nelems
        if self.live[category] > self.category_peak[category]:
            self.category_peak[category] = self.live[category]
        self.total_live += nelems
        if self.total_live > self.total_peak:
            self.total_peak = self.total_live

    def free(self, category: str, nelems: int):
        self.live[category] -= nelems
        if self.live[category] < 0:
            raise ValueError(f"ledger underflow in category {category!r}")
        self.total_live -= nelems

    @contextmanager
    def hold(self, category: str, nelems: int):
        self.alloc(category, nelems)
        try:
            yield
        finally:
            self.free(category, nelems)

    def record_gather(self, name: str, nelems: int):
        """A full weight was assembled from shards (and will be discarded)."""
        self.gather_events += 1
        self.gather_elements += nelems
        self.gathered_names[name] += nelems

    def peak(self, category: str | None = None) -> int:
        if category is None:
            return self.total_peak
        return self.category_peak[category]

    def live_elems(self, category: str | None = None) -> int:
        if category is None:
            return self.total_live
        return self.live[category]


class NullLedger:
    """No-op stand-in so hot paths skip instrumentation branches."""

    __slots__ = ()

    def alloc(self, category, nelems):
        pass

    def free(self, category, nelems):
        pass

    @contextmanager
    def hold(self, category, nelems):
        yield

    def record_gather(self, name, nelems):
        pass

    def peak(self, category=None):
        return 0

    def live_elems(self, category=None):
        return 0


NULL_LEDGER = NullLedger()
