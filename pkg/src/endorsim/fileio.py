"""Spectrum, map, table and report files. All writes are atomic."""

import csv
import io
import json
import math
import os
import tempfile

import numpy as np

from .lineshapes import Spectrum


def atomic_write_text(path, text):
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(x):
    return repr(float(x))


def _meta_value(v):
    if isinstance(v, (np.floating, np.integer)):
        v = v.item()
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    return json.dumps(v)


def _parse_meta(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        if text in ("nan", "inf", "-inf"):
            return float(text)
        return text


def format_spectrum(spec):
    lines = [f"# {k}={_meta_value(v)}" for k, v in spec.meta.items()]
    lines.append("frequency_MHz,signal")
    lines += [f"{_fmt(f)},{_fmt(s)}" for f, s in zip(spec.frequencies, spec.signal)]
    return "\n".join(lines) + "\n"


def write_spectrum(path, spec):
    atomic_write_text(path, format_spectrum(spec))


def read_spectrum(path):
    """Parse a spectrum file; raises ValueError with the file name on bad input."""
    meta, freqs, sig = {}, [], []
    header_seen = False
    with open(path, newline="") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if "=" not in body:
                    continue
                k, v = body.split("=", 1)
                meta[k.strip()] = _parse_meta(v.strip())
                continue
            if not header_seen:
                header_seen = True
                if line.replace(" ", "") == "frequency_MHz,signal":
                    continue
            parts = line.split(",")
            try:
                if len(parts) != 2:
                    raise ValueError
                freqs.append(float(parts[0]))
                sig.append(float(parts[1]))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: expected two numeric columns") from None
    if not freqs:
        raise ValueError(f"{path}: no data rows")
    try:
        return Spectrum(np.array(freqs), np.array(sig), meta)
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None


def write_map(path, row_axis, col_axis, matrix, corner="f_nmr_MHz\\f_esr_MHz"):
    """Matrix with the first row holding column axis values and first column the row axis."""
    m = np.asarray(matrix, float)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([corner] + [_fmt(c) for c in col_axis])
    for r, row in zip(row_axis, m):
        w.writerow([_fmt(r)] + [_fmt(v) for v in row])
    atomic_write_text(path, buf.getvalue())


def read_map(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    cols = np.array([float(x) for x in rows[0][1:]])
    ax = np.array([float(r[0]) for r in rows[1:]])
    mat = np.array([[float(x) for x in r[1:]] for r in rows[1:]])
    return ax, cols, mat


def write_table(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else
                    ("" if v is None else v) for v in row])
    atomic_write_text(path, buf.getvalue())


def read_table(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")
