"""Plain-text and image artifacts: CSV tables, ASCII state grids and
grayscale PGM heatmaps.  Floats are written with ``repr`` so files
round-trip exactly.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def read_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(v) for v in r] for r in rows[1:]])


def write_states(path, states) -> Path:
    """ASCII grid: one line per row m, one 0/1 character per column n."""
    s = np.asarray(states, dtype=int)
    Path(path).write_text("\n".join("".join(str(v) for v in row) for row in s) + "\n")
    return Path(path)


def read_states(path) -> np.ndarray:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines or any(len(ln) != len(lines[0]) for ln in lines):
        raise ValueError(f"{path}: ragged or empty state grid")
    if any(ch not in "01" for ln in lines for ch in ln):
        raise ValueError(f"{path}: state grid may only contain 0 and 1")
    return np.array([[int(ch) for ch in ln] for ln in lines], dtype=np.int8)


def write_pgm(path, image, lo=None, hi=None) -> Path:
    """8-bit binary PGM; row 0 of ``image`` is written at the bottom."""
    a = np.asarray(image, dtype=float)
    finite = a[np.isfinite(a)]
    lo = (finite.min() if finite.size else 0.0) if lo is None else lo
    hi = (finite.max() if finite.size else 1.0) if hi is None else hi
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    img = np.clip(np.nan_to_num((a - lo) * scale, nan=0.0, neginf=0.0, posinf=255.0), 0, 255)
    img = np.flipud(np.round(img).astype(np.uint8))
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())
    return Path(path)


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    w, h = (int(v) for v in parts[1].split())
    return np.flipud(np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w))


def write_current(path, coeffs) -> Path:
    c = np.asarray(coeffs)
    rows = [
        (m + 1, n + 1, float(c[m, n].real), float(c[m, n].imag), float(abs(c[m, n])), float(np.angle(c[m, n])))
        for m in range(c.shape[0])
        for n in range(c.shape[1])
    ]
    return write_csv(path, ["m", "n", "re", "im", "magnitude", "phase_rad"], rows)


def read_current(path) -> np.ndarray:
    _, a = read_csv(path)
    m, n = int(a[:, 0].max()), int(a[:, 1].max())
    out = np.zeros((m, n), dtype=complex)
    out[a[:, 0].astype(int) - 1, a[:, 1].astype(int) - 1] = a[:, 2] + 1j * a[:, 3]
    return out


def write_footprint(path, grid, power, reference: float) -> Path:
    X, Y = grid.mesh()
    p = np.asarray(power, dtype=float)
    with np.errstate(divide="ignore"):
        db = 10.0 * np.log10(p / reference)
    rows = zip(X.ravel().tolist(), Y.ravel().tolist(), p.ravel().tolist(), db.ravel().tolist())
    return write_csv(path, ["x", "y", "F_linear", "F_dB"], rows)


def write_json(path, obj) -> Path:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return Path(path)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, complex):
        return [o.real, o.imag]
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
