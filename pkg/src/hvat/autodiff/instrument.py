"""Operation-level FLOP tally, used as an independent check on closed forms.

Conventions: a matmul costs 2 flops per multiply-accumulate; pointwise
arithmetic and activations cost 1 per output element; softmax and
log-softmax cost 3 per element; layer norm costs 7 per element; pure data
movement (reshape, transpose, slicing, concat, gathers) costs nothing.
"""

from __future__ import annotations

import contextlib
from collections import defaultdict

LAYER_NORM_FLOPS = 7
SOFTMAX_FLOPS = 3


class FlopCounter:
    def __init__(self):
        self.by_section: dict[str, int] = defaultdict(int)
        self.by_op: dict[str, int] = defaultdict(int)
        self.section = "other"

    @property
    def total(self) -> int:
        return sum(self.by_section.values())


_active: list[FlopCounter] = []


def record(op: str, flops: int) -> None:
    if _active:
        counter = _active[-1]
        counter.by_section[counter.section] += int(flops)
        counter.by_op[op] += int(flops)


@contextlib.contextmanager
def section(name: str):
    """Attribute flops recorded inside the block to ``name``."""
    if not _active:
        yield
        return
    counter = _active[-1]
    prev = counter.section
    counter.section = name
    try:
        yield
    finally:
        counter.section = prev


@contextlib.contextmanager
def count_flops():
    counter = FlopCounter()
    _active.append(counter)
    try:
        yield counter
    finally:
        _active.pop()
