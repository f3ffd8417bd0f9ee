"""SDPA sparse format export and import.

SDPA states the problem as ``min sum_i c_i x_i`` subject to
``sum_i x_i F_i - F_0`` PSD, so ``F_0`` is written with flipped sign.  The
constant objective term (the coefficient of ``y_0``) has no place in the
format and goes into a ``*`` comment line.
"""

from __future__ import annotations

import re

import numpy as np

from .relax import SdpBlock, SdpProblem

__all__ = ["export_sdpa", "parse_sdpa", "SdpaData"]


def _fmt(x: float) -> str:
    return repr(float(x))


def export_sdpa(sdp: SdpProblem, path=None) -> str:
    """SDPA text with entries sorted by (matrix, block, row, column)."""
    m = sdp.n_moments
    lines = [
        f"* moment relaxation: order {sdp.order}, delta {_fmt(sdp.delta)}, {sdp.n_vars} variables",
        f"* objective constant {_fmt(sdp.c[0])}",
        str(m),
        str(len(sdp.blocks)),
        " ".join(str(b.size) for b in sdp.blocks),
        " ".join(_fmt(v) for v in sdp.c[1:]),
    ]
    entries = {}
    for k, b in enumerate(sdp.blocks, 1):
        for var, r, c, val in zip(b.var, b.row, b.col, b.val):
            key = (int(var), k, int(r) + 1, int(c) + 1)
            entries[key] = entries.get(key, 0.0) + float(val)
    for (var, k, r, c), val in sorted(entries.items()):
        if val == 0:
            continue
        if var == 0:
            val = -val
        lines.append(f"{var} {k} {r} {c} {_fmt(val)}")
    text = "\n".join(lines) + "\n"
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


class SdpaData:
    """Parsed SDPA problem: ``c``, block sizes and per-block triplets."""

    def __init__(self, m, sizes, c, entries, constant=0.0):
        self.m = m
        self.sizes = sizes
        self.c = c
        self.entries = entries  # list of (matno, block, i, j, value), 1-based
        self.constant = constant

    def blocks(self) -> list[SdpBlock]:
        """Blocks in this package's sign convention (``F_0`` restored)."""
        out = []
        for k, s in enumerate(self.sizes, 1):
            rows = [e for e in self.entries if e[1] == k]
            var = np.array([e[0] for e in rows], dtype=int)
            val = np.array([-e[4] if e[0] == 0 else e[4] for e in rows])
            out.append(SdpBlock(s, var, np.array([e[2] - 1 for e in rows], dtype=int),
                                np.array([e[3] - 1 for e in rows], dtype=int), val))
        return out


_SPLIT = re.compile(r"[\s,{}()]+")


def parse_sdpa(text: str) -> SdpaData:
    """Read SDPA sparse text (comments start with ``*`` or ``"``)."""
    constant = 0.0
    body = []
    for line in text.splitlines():
        s = line.strip()
        if not s:
            continue
        if s[0] in "*\"":
            hit = re.search(r"objective constant\s+(\S+)", s)
            if hit:
                constant = float(hit.group(1))
            continue
        body.append(s)
    if len(body) < 4:
        raise ValueError("SDPA text is truncated")
    try:
        m = int(_SPLIT.split(body[0])[0])
        nblocks = int(_SPLIT.split(body[1])[0])
        sizes = [abs(int(t)) for t in _SPLIT.split(body[2]) if t][:nblocks]
        c = np.array([float(t) for t in _SPLIT.split(body[3]) if t][:m])
        entries = []
        for s in body[4:]:
            tok = [t for t in _SPLIT.split(s) if t]
            entries.append((int(tok[0]), int(tok[1]), int(tok[2]), int(tok[3]), float(tok[4])))
    except (ValueError, IndexError) as exc:
        raise ValueError(f"malformed SDPA text: {exc}") from None
    if len(sizes) != nblocks or len(c) != m:
        raise ValueError("SDPA header counts do not match")
    return SdpaData(m, sizes, c, entries, constant)
