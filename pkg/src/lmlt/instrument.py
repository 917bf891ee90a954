"""Opt-in multiply-accumulate instrumentation.

Counters are per-invocation objects activated through a context manager;
the active counter and scope stack are thread-local, never shared.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

_tls = threading.local()


class MacCounter:
    """Accumulates MAC counts keyed by the dotted scope active at record time."""

    def __init__(self):
        self.by_scope: dict[str, int] = {}

    def add(self, scope_name: str, macs: int) -> None:
        self.by_scope[scope_name] = self.by_scope.get(scope_name, 0) + macs

    @property
    def total(self) -> int:
        return sum(self.by_scope.values())


def _stack() -> list:
    if not hasattr(_tls, "counters"):
        _tls.counters = []
        _tls.scopes = []
    return _tls.counters


@contextmanager
def counting(counter: MacCounter):
    """Route MAC records from this thread into `counter`."""
    stack = _stack()
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.pop()


@contextmanager
def scope(name: str):
    """Push a dotted scope segment used to label recorded MACs."""
    _stack()  # ensure thread-local init
    _tls.scopes.append(name)
    try:
        yield
    finally:
        _tls.scopes.pop()


def record_macs(macs: int) -> None:
    """Record `macs` under the current scope if a counter is active."""
    stack = _stack()
    if stack:
        stack[-1].add(".".join(_tls.scopes), int(macs))
