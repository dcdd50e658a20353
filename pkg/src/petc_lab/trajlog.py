"""Trajectory log of a closed-loop run and its CSV form.

Row z describes sampling instant t = z h *after* the trigger/channel step at
that instant: `xhat` and `u` are the held state and input applied on
[zh, (z+1)h).  `m_bar` (failures since the last success, before the decision
at z) is not written; it is rebuilt from the sent/delivered columns.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError
from .trigger import Reason


@dataclass
class TrajectoryLog:
    h: float
    m: int
    z: np.ndarray
    t: np.ndarray
    x: np.ndarray
    xhat: np.ndarray
    u: np.ndarray
    V: np.ndarray
    S: np.ndarray
    sent: np.ndarray
    delivered: np.ndarray
    reason: np.ndarray
    sigma_z: np.ndarray
    threshold: np.ndarray
    m_bar: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.z.size

    @property
    def success_index(self) -> np.ndarray:
        return np.flatnonzero(self.sent & self.delivered)

    @property
    def tau(self) -> np.ndarray:
        """Successful transmission times."""
        return self.t[self.success_index]

    @property
    def gaps(self) -> np.ndarray:
        """Times between consecutive successful transmissions (index gaps times h)."""
        return np.diff(self.success_index) * self.h

    @property
    def mean_gap(self) -> float:
        g = np.diff(self.success_index)
        return float(g.mean() * self.h) if g.size else float("nan")

    def columns(self):
        n, b = self.x.shape[1], self.u.shape[1]
        return (["z", "t"] + [f"x{i}" for i in range(n)] + [f"xhat{i}" for i in range(n)]
                + [f"u{i}" for i in range(b)]
                + ["V", "S", "sent", "delivered", "reason", "sigma_z", "threshold"])

    def to_csv(self, path):
        n, b = self.x.shape[1], self.u.shape[1]
        fmt = ",".join(["%d"] + ["%.16e"] * (1 + 2 * n + b + 2) + ["%d", "%d", "%s", "%.16e", "%.16e"])
        names = [r.name for r in Reason]
        cols = ([self.z.tolist(), self.t.tolist()] + [self.x[:, i].tolist() for i in range(n)]
                + [self.xhat[:, i].tolist() for i in range(n)] + [self.u[:, i].tolist() for i in range(b)]
                + [self.V.tolist(), self.S.tolist(), self.sent.astype(int).tolist(),
                   self.delivered.astype(int).tolist(), [names[r] for r in self.reason],
                   self.sigma_z.tolist(), self.threshold.tolist()])
        body = "\n".join(fmt % row for row in zip(*cols))
        Path(path).write_text(",".join(self.columns()) + "\n" + body + "\n")


def rebuild_m_bar(sent, delivered):
    out = np.zeros(sent.size, dtype=np.int64)
    cur = 0
    for z in range(sent.size):
        out[z] = cur
        if sent[z]:
            cur = 0 if delivered[z] else cur + 1
    out[0] = 0
    return out


def read_csv(path, h, m) -> TrajectoryLog:
    text = Path(path).read_text()
    if not text.endswith("\n"):
        raise ParseError(f"{path}: file does not end with a newline (truncated?)")
    lines = text[:-1].split("\n")
    header = lines[0].split(",")
    n = sum(1 for c in header if c.startswith("x") and not c.startswith("xhat"))
    b = sum(1 for c in header if c.startswith("u"))
    expected = ["z", "t"] + [f"x{i}" for i in range(n)] + [f"xhat{i}" for i in range(n)] + \
        [f"u{i}" for i in range(b)] + ["V", "S", "sent", "delivered", "reason", "sigma_z", "threshold"]
    if header != expected or n == 0:
        raise ParseError(f"{path}: unexpected header {header}")
    width = len(header)
    reasons = {r.name: int(r) for r in Reason}
    ri = header.index("reason")
    rows, rs = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != width:
            raise ParseError(f"{path}:{lineno}: expected {width} fields, found {len(parts)}")
        try:
            rs.append(reasons[parts[ri]])
            del parts[ri]
            rows.append([float(p) for p in parts])
        except (KeyError, ValueError) as exc:
            raise ParseError(f"{path}:{lineno}: cannot parse row ({exc})") from None
    if not rows:
        raise ParseError(f"{path}: no data rows")
    A = np.array(rows)
    k = 2
    x = A[:, k:k + n]; k += n
    xhat = A[:, k:k + n]; k += n
    u = A[:, k:k + b]; k += b
    V, S, sent, delivered, sz, thr = (A[:, k + i] for i in range(6))
    sent = sent.astype(bool)
    delivered = delivered.astype(bool)
    return TrajectoryLog(h=h, m=m, z=A[:, 0].astype(np.int64), t=A[:, 1], x=x, xhat=xhat, u=u,
                         V=V, S=S, sent=sent, delivered=delivered,
                         reason=np.array(rs, dtype=np.int8), sigma_z=sz, threshold=thr,
                         m_bar=rebuild_m_bar(sent, delivered), meta={"source": str(path)})
