"""Atomic file writes, CSV export and run manifests."""
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np


def fmt(x):
    """Integers as integers, floats in shortest round-trip decimal form."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    x = float(x)
    if x == 0.0:
        return "0"
    return repr(x)


def _umask():
    mask = os.umask(0)
    os.umask(mask)
    return mask


def atomic_write_bytes(path, data):
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o666 & ~_umask())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def csv_text(header, rows):
    out = io.StringIO()
    out.write(",".join(header) + "\n")
    for row in rows:
        out.write(",".join(v if isinstance(v, str) else fmt(v) for v in row) + "\n")
    return out.getvalue()


def write_csv(path, header, rows):
    atomic_write_text(path, csv_text(header, rows))


def grid_block_csv(times, blocks):
    """One row per time; columns ``name[i][j]`` flattened row-major per block.

    ``blocks`` maps a name to an array of shape (len(times), rows, cols).
    """
    header = ["t"]
    cols = [np.asarray(times, dtype=float)[:, None]]
    for name, vals in blocks.items():
        vals = np.asarray(vals, dtype=float)
        if vals.ndim == 2:
            vals = vals[:, :, None]
        r, c = vals.shape[1:]
        header += [f"{name}[{i}][{j}]" for i in range(r) for j in range(c)]
        cols.append(vals.reshape(vals.shape[0], r * c))
    table = np.hstack(cols)
    return csv_text(header, table.tolist())


def read_grid_csv(path):
    """Inverse of grid_block_csv for tests and replotting: (header, array)."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return header, data


def write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def npz_bytes(arrays):
    """Uncompressed npz archive; byte-stable for identical inputs."""
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    return buf.getvalue()
