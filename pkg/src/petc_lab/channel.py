"""Lossy network with acknowledgments and at most m consecutive losses."""
from __future__ import annotations

import copy
import logging
from pathlib import Path

import numpy as np

from .errors import ConfigError, TraceError

log = logging.getLogger(__name__)

ALWAYS, BERNOULLI, TRACE = 0, 1, 2
MODES = {"always": ALWAYS, "bernoulli": BERNOULLI, "trace": TRACE}
_CHUNK = 1 << 16


class ChannelModel:
    """Dropout process. Every attempt consumes one entry of the underlying
    stream (uniform draw or trace symbol), including forced deliveries, so two
    runs with the same seed see the same per-attempt outcomes."""

    def __init__(self, m, mode="always", p=0.0, seed=0, trace=None):
        if int(m) != m or m < 0:
            raise ConfigError(f"loss bound m must be a nonnegative integer, got {m}")
        if mode not in MODES:
            raise ConfigError(f"unknown channel mode {mode!r}")
        if not 0.0 <= p <= 1.0:
            raise ConfigError(f"loss probability must lie in [0, 1], got {p}")
        self.m = int(m)
        self.mode = mode
        self.p = float(p)
        self.seed = int(seed)
        self.trace = np.zeros(0, dtype=bool) if trace is None else np.asarray(trace, dtype=bool)
        if mode == "trace":
            _validate_trace(self.trace, self.m)
        self.consecutive_failures = 0
        self.attempts = 0
        self._rng = np.random.Generator(np.random.PCG64(self.seed))
        self._draws = np.empty(0)
        self._warned = False

    @property
    def code(self):
        return MODES[self.mode]

    def fresh(self) -> "ChannelModel":
        """Copy reset to the initial state (same seed, same trace)."""
        return ChannelModel(self.m, self.mode, self.p, self.seed, self.trace.copy())

    def copy(self) -> "ChannelModel":
        return copy.deepcopy(self)

    def _ensure(self, n):
        while self._draws.size < n:
            self._draws = np.concatenate([self._draws, self._rng.random(_CHUNK)])

    def stream(self, n) -> np.ndarray:
        """The next n stream entries without consuming them (engine fast path).
        Bernoulli: uniforms in [0, 1); trace: 1.0 deliver / 0.0 lose / NaN exhausted."""
        k = self.attempts
        if self.mode == "bernoulli":
            self._ensure(k + n)
            return self._draws[k:k + n].copy()
        if self.mode == "trace":
            out = np.full(n, np.nan)
            tail = self.trace[k:k + n].astype(float)
            out[:tail.size] = tail
            return out
        return np.zeros(n)

    def advance(self, attempts, consecutive_failures):
        """Account for attempts resolved outside of attempt()."""
        before = self.attempts
        self.attempts += int(attempts)
        self.consecutive_failures = int(consecutive_failures)
        if self.mode == "trace" and self.attempts > self.trace.size >= before:
            self._warn_exhausted()

    def _warn_exhausted(self):
        if not self._warned:
            log.warning("channel trace exhausted after %d attempts; delivering all further packets",
                        self.trace.size)
            self._warned = True

    def attempt(self, z=None) -> bool:
        k = self.attempts
        self.attempts += 1
        if self.mode == "always":
            delivered = True
        elif self.mode == "bernoulli":
            self._ensure(k + 1)
            lost = self._draws[k] < self.p and self.consecutive_failures < self.m
            delivered = not lost
        else:
            if k < self.trace.size:
                delivered = bool(self.trace[k]) or self.consecutive_failures >= self.m
            else:
                self._warn_exhausted()
                delivered = True
        self.consecutive_failures = 0 if delivered else self.consecutive_failures + 1
        return delivered


def _validate_trace(trace, m):
    run = 0
    for i, ok in enumerate(trace):
        run = 0 if ok else run + 1
        if run > m:
            raise TraceError(f"trace has {run} consecutive losses ending at attempt {i}, bound is m={m}")


def load_trace(sequence, m) -> ChannelModel:
    """Trace channel from booleans or a 'T'/'F' string."""
    if isinstance(sequence, str):
        sequence = parse_trace_text(sequence)
    return ChannelModel(m, mode="trace", trace=[bool(s) for s in sequence])


def parse_trace_text(text) -> list[bool]:
    out = []
    for ch in text:
        if ch in "Tt":
            out.append(True)
        elif ch in "Ff":
            out.append(False)
        elif not ch.isspace():
            raise TraceError(f"invalid trace symbol {ch!r}; expected 'T' or 'F'")
    return out


def read_trace_file(path, m) -> ChannelModel:
    return load_trace(parse_trace_text(Path(path).read_text()), m)


def bernoulli(p, m, seed=0) -> ChannelModel:
    return ChannelModel(m, mode="bernoulli", p=p, seed=seed)


def always_deliver(m=0) -> ChannelModel:
    return ChannelModel(m, mode="always")
