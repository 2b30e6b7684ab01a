"""CSV export of traces and samples with self-describing ``#`` headers.

Floats are written with ``repr`` so a re-parse reproduces every bit. A trace
file holds one chain; ``x_i`` columns are the state before the step and
``x0t_i`` the posterior-mean estimate at that state.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .sampler import SampleTrace
from .schedule import RNG_ALGORITHM

TRACE_FIXED = ("step_index", "t", "repeat", "energy", "grad_norm")


class TraceIOError(OSError):
    pass


def _header_lines(meta: dict) -> list:
    meta = dict(meta)
    meta.setdefault("rng", RNG_ALGORITHM)
    lines = []
    for key in sorted(meta):
        value = str(meta[key])
        if "\n" in value:
            raise ValueError(f"metadata value for {key!r} spans lines")
        lines.append(f"# {key}={value}")
    return lines


def _parse_header(lines) -> dict:
    meta = {}
    for line in lines:
        key, _, value = line[1:].strip().partition("=")
        meta[key] = value
    return meta


def _fmt(v: float) -> str:
    return repr(float(v))


def _write(path, text: str):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise TraceIOError(f"cannot write {path}: {exc.strerror or exc}") from None
    return path


def export_trace(trace: SampleTrace, path, meta: dict | None = None, chain: int = 0, dim: int | None = None):
    """Write chain ``chain`` of ``trace``. ``dim`` is needed for an empty trace."""
    if trace.steps:
        dim = trace.steps[0].x.shape[1]
    elif dim is None:
        dim = int(trace.meta.get("dim", 0))
    head = dict(trace.meta)
    head.update(meta or {})
    head["chain"] = chain
    head["dim"] = dim
    cols = list(TRACE_FIXED) + [f"x_{i}" for i in range(dim)] + [f"x0t_{i}" for i in range(dim)]
    rows = _header_lines(head) + [",".join(cols)]
    for s in trace.steps:
        vals = [str(s.step_index), str(s.t), str(s.repeat), _fmt(s.energy[chain]), _fmt(s.grad_norm[chain])]
        vals += [_fmt(v) for v in s.x[chain]] + [_fmt(v) for v in s.x0[chain]]
        rows.append(",".join(vals))
    return _write(path, "\n".join(rows) + "\n")


def read_trace(path) -> SampleTrace:
    """Parse a file written by :func:`export_trace` into a one-chain trace."""
    lines = Path(path).read_text().splitlines()
    comments = [ln for ln in lines if ln.startswith("#")]
    body = [ln for ln in lines if ln and not ln.startswith("#")]
    meta = _parse_header(comments)
    cols = body[0].split(",")
    if tuple(cols[:5]) != TRACE_FIXED:
        raise ValueError(f"unexpected trace header {body[0]!r}")
    d = (len(cols) - 5) // 2
    trace = SampleTrace(meta=meta)
    for ln in body[1:]:
        f = ln.split(",")
        if int(f[0]) != len(trace.steps):
            raise ValueError(f"step_index {f[0]} out of order")
        x = np.array([float(v) for v in f[5:5 + d]])[None, :]
        x0 = np.array([float(v) for v in f[5 + d:5 + 2 * d]])[None, :]
        trace.append(int(f[1]), int(f[2]), x, x0, np.array([float(f[3])]), np.array([float(f[4])]))
    return trace


def write_samples(x: np.ndarray, path, meta: dict | None = None):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    rows = _header_lines(meta or {}) + [",".join(f"x_{i}" for i in range(x.shape[1]))]
    rows += [",".join(_fmt(v) for v in row) for row in x]
    return _write(path, "\n".join(rows) + "\n")


def read_samples(path):
    """Return ``(samples, meta)`` from a file written by :func:`write_samples`."""
    lines = Path(path).read_text().splitlines()
    meta = _parse_header(ln for ln in lines if ln.startswith("#"))
    body = [ln for ln in lines if ln and not ln.startswith("#")]
    if not body or not body[0].startswith("x_"):
        raise ValueError(f"{path}: not a samples file")
    d = len(body[0].split(","))
    data = np.array([[float(v) for v in ln.split(",")] for ln in body[1:]], dtype=np.float64)
    return data.reshape(-1, d), meta


def write_table(rows: list, columns: list, path, meta: dict | None = None):
    """Plain CSV table (summary/comparison) with the same header convention."""
    out = _header_lines(meta or {}) + [",".join(columns)]
    for r in rows:
        out.append(",".join(_fmt(r[c]) if isinstance(r[c], float) else str(r[c]) for c in columns))
    return _write(path, "\n".join(out) + "\n")
