"""File formats: UDLMAT1 matrices, binary PGM images and CSV run records.

UDLMAT1 layout: an 8-line ASCII header (``UDLMAT1``, the dtype, ``ndim``,
one dimension per line, blank lines up to 8), followed by little-endian
float64 data in row-major order.

CSV records start with one ``#``-prefixed JSON line carrying run metadata
(including the spec hash), then a standard CSV header and rows.
"""

import csv
import hashlib
import json
import os

import numpy as np

from .errors import FormatError

MAGIC = "UDLMAT1"
HEADER_LINES = 8
MAX_NDIM = HEADER_LINES - 3


# -- UDLMAT1 ----------------------------------------------------------------

def write_matrix(path, array):
    a = np.asarray(array, dtype="<f8", order="C")
    if a.ndim > MAX_NDIM:
        raise ValueError(f"UDLMAT1 stores at most {MAX_NDIM} dimensions, got {a.ndim}")
    lines = [MAGIC, "float64", str(a.ndim)] + [str(d) for d in a.shape]
    lines += [""] * (HEADER_LINES - len(lines))
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        fh.write(a.tobytes(order="C"))


def read_matrix(path):
    """Read a UDLMAT1 file into a float64 array."""
    with open(path, "rb") as fh:
        raw = fh.read()
    offset = 0
    lines = []
    for _ in range(HEADER_LINES):
        end = raw.find(b"\n", offset)
        if end < 0:
            raise FormatError("truncated UDLMAT1 header", offset)
        lines.append((raw[offset:end], offset))
        offset = end + 1
    text = [(ln.decode("ascii", errors="replace").strip(), off) for ln, off in lines]
    if text[0][0] != MAGIC:
        raise FormatError(f"bad magic {text[0][0]!r}", 0)
    if text[1][0] != "float64":
        raise FormatError(f"unsupported dtype {text[1][0]!r}", text[1][1])
    try:
        ndim = int(text[2][0])
    except ValueError:
        raise FormatError(f"bad ndim {text[2][0]!r}", text[2][1]) from None
    if not 0 <= ndim <= MAX_NDIM:
        raise FormatError(f"ndim {ndim} out of range", text[2][1])
    shape = []
    for s, off in text[3:3 + ndim]:
        if not s.isdigit():
            raise FormatError(f"bad dimension {s!r}", off)
        shape.append(int(s))
    for s, off in text[3 + ndim:]:
        if s:
            raise FormatError("unexpected content in header padding", off)
    expected = 8 * int(np.prod(shape, dtype=np.int64))
    if len(raw) - offset != expected:
        raise FormatError(f"expected {expected} data bytes, found {len(raw) - offset}",
                          offset)
    return np.frombuffer(raw, dtype="<f8", offset=offset).reshape(shape).astype(np.float64)


# -- PGM --------------------------------------------------------------------

def _pgm_token(raw, pos):
    """Next whitespace-separated header token, skipping ``#`` comments."""
    n = len(raw)
    while pos < n:
        c = raw[pos:pos + 1]
        if c == b"#":
            while pos < n and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("truncated PGM header", start)
    return raw[start:pos], start, pos


def read_pgm(path):
    """Read a binary (P5) 8-bit PGM image as a ``uint8`` array."""
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, off, pos = _pgm_token(raw, 0)
    if magic != b"P5":
        raise FormatError(f"not a binary PGM (magic {magic!r})", off)
    vals = []
    for what in ("width", "height", "maxval"):
        tok, off, pos = _pgm_token(raw, pos)
        if not tok.isdigit():
            raise FormatError(f"bad {what} {tok!r}", off)
        vals.append(int(tok))
    w, h, maxval = vals
    if w == 0 or h == 0:
        raise FormatError("empty image", off)
    if not 0 < maxval < 256:
        raise FormatError(f"only 8-bit PGM is supported (maxval {maxval})", off)
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after maxval", pos)
    pos += 1
    if len(raw) - pos < w * h:
        raise FormatError(f"expected {w * h} pixel bytes, found {len(raw) - pos}", pos)
    img = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)
    if np.any(img > maxval):
        bad = int(np.flatnonzero(img.ravel() > maxval)[0])
        raise FormatError(f"pixel exceeds maxval {maxval}", pos + bad)
    return img.copy(), maxval


def write_pgm(path, image, maxval=255):
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("PGM images are 2-D")
    img = np.clip(np.rint(img), 0, maxval).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii"))
        fh.write(img.tobytes())


# -- CSV run records --------------------------------------------------------

def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def stamped_json(obj, **dump_args):
    """JSON text with ``spec_hash`` as the leading key and the rest sorted."""
    head = {"spec_hash": obj["spec_hash"]} if "spec_hash" in obj else {}
    rest = {k: obj[k] for k in sorted(obj) if k != "spec_hash"}
    dump_args.setdefault("separators", (",", ":"))
    return json.dumps({**head, **rest}, default=_json_default, **dump_args)


def spec_hash(spec):
    """SHA-256 of the canonical JSON form of an experiment spec."""
    return hashlib.sha256(canonical_json(spec).encode("utf-8")).hexdigest()


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ""
    return str(v)


class RecordWriter:
    """Append-only CSV writer; the metadata line is written before any row.

    Rows are flushed as they are written so an interrupted run leaves a
    readable prefix.
    """

    def __init__(self, path, columns, meta):
        self.path = path
        self.columns = list(columns)
        self._fh = open(path, "w", newline="", encoding="utf-8")
        self._fh.write("# " + stamped_json(meta) + "\n")
        self._csv = csv.writer(self._fh, lineterminator="\r\n")
        self._csv.writerow(self.columns)
        self._fh.flush()

    def write(self, row):
        if isinstance(row, dict):
            missing = set(row) - set(self.columns)
            if missing:
                raise KeyError(f"unknown columns {sorted(missing)}")
            row = [row.get(c) for c in self.columns]
        self._csv.writerow([_cell(v) for v in row])
        self._fh.flush()

    def close(self):
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_record(path):
    """Return ``(meta, columns, rows)`` of a CSV run record (rows as strings)."""
    with open(path, newline="", encoding="utf-8") as fh:
        first = fh.readline()
        if not first.startswith("# "):
            raise FormatError(f"{path}: missing metadata line", 0)
        meta = json.loads(first[2:])
        reader = csv.reader(fh)
        columns = next(reader)
        rows = list(reader)
    return meta, columns, rows


def record_body(path):
    """Bytes of a record after its metadata line."""
    with open(path, "rb") as fh:
        fh.readline()
        return fh.read()


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(stamped_json(obj, indent=2, separators=(",", ": ")) + "\n")


def file_digest(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path
