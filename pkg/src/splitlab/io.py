"""Config parsing, chain serialization, report lines and delimited sidecars.

Configs and reports are JSON.  Every value read from a config goes through
a typed accessor that raises :class:`ConfigError` naming the dotted key, so
a malformed document is always reported against the field at fault.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .chain import ChainSpec
from .errors import ConfigError, SplitlabError

_MISSING = object()


class Section:
    """Read-only view of one JSON object with key-path aware accessors."""

    def __init__(self, data: Any, path: str = ""):
        if not isinstance(data, dict):
            raise ConfigError(path or "<root>", "expected an object")
        self.data = data
        self.path = path

    def key(self, name: str) -> str:
        return f"{self.path}.{name}" if self.path else name

    def has(self, name: str) -> bool:
        return name in self.data and self.data[name] is not None

    def raw(self, name: str, default=_MISSING):
        if name not in self.data or self.data[name] is None:
            if default is _MISSING:
                raise ConfigError(self.key(name), "required key is missing")
            return default
        return self.data[name]

    def section(self, name: str, default=_MISSING) -> "Section":
        v = self.raw(name, {} if default is not _MISSING else _MISSING)
        return Section(v, self.key(name))

    def number(self, name: str, default=_MISSING, *, positive=False, nonneg=False, lo=None, hi=None) -> float:
        if not self.has(name) and default is not _MISSING:
            return default
        v = self.raw(name)
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise ConfigError(self.key(name), f"expected a finite number, got {v!r}")
        v = float(v)
        if positive and not v > 0:
            raise ConfigError(self.key(name), f"must be positive, got {v!r}")
        if nonneg and v < 0:
            raise ConfigError(self.key(name), f"must be nonnegative, got {v!r}")
        if lo is not None and v < lo:
            raise ConfigError(self.key(name), f"must be at least {lo}, got {v!r}")
        if hi is not None and v > hi:
            raise ConfigError(self.key(name), f"must be at most {hi}, got {v!r}")
        return v

    def integer(self, name: str, default=_MISSING, *, lo=None) -> int:
        if not self.has(name) and default is not _MISSING:
            return default
        v = self.raw(name)
        if isinstance(v, bool) or not isinstance(v, int):
            if isinstance(v, float) and v.is_integer():
                v = int(v)
            else:
                raise ConfigError(self.key(name), f"expected an integer, got {v!r}")
        if lo is not None and v < lo:
            raise ConfigError(self.key(name), f"must be at least {lo}, got {v!r}")
        return int(v)

    def boolean(self, name: str, default=_MISSING) -> bool:
        if not self.has(name) and default is not _MISSING:
            return default
        v = self.raw(name)
        if not isinstance(v, bool):
            raise ConfigError(self.key(name), f"expected true or false, got {v!r}")
        return v

    def string(self, name: str, default=_MISSING, choices: Sequence[str] | None = None) -> str:
        if not self.has(name) and default is not _MISSING:
            return default
        v = self.raw(name)
        if not isinstance(v, str):
            raise ConfigError(self.key(name), f"expected a string, got {v!r}")
        if choices is not None and v not in choices:
            raise ConfigError(self.key(name), f"must be one of {', '.join(choices)}; got {v!r}")
        return v

    def numbers(self, name: str, default=_MISSING, length: int | None = None) -> list:
        if not self.has(name) and default is not _MISSING:
            return default
        v = self.raw(name)
        if not isinstance(v, list) or not all(
            isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x) for x in v
        ):
            raise ConfigError(self.key(name), "expected a list of finite numbers")
        if length is not None and len(v) != length:
            raise ConfigError(self.key(name), f"expected {length} numbers, got {len(v)}")
        return [float(x) for x in v]


def load_config(path: str | Path) -> dict:
    """Parse a JSON config file; syntax errors become :class:`ConfigError`."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<document>", f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError("<root>", "expected an object")
    return data


# ---------------------------------------------------------------------- chain documents


def spec_to_dict(spec: ChainSpec) -> dict:
    """Document with keys ``M``, ``gamma1``, ``kernels`` and ``fM``."""
    return {
        "M": spec.M,
        "gamma1": [float(x) for x in spec.gamma1],
        "kernels": [np.asarray(K).tolist() for K in spec.kernels],
        "fM": [float(x) for x in spec.fM],
    }


def spec_from_dict(data: Any, path: str = "spec") -> ChainSpec:
    """Inverse of :func:`spec_to_dict`.

    ``kernels`` lists the ``M - 1`` kernels between consecutive thresholds;
    it may be omitted when ``M = 1``.
    """
    sec = Section(data, path)
    M = sec.integer("M", lo=1)
    gamma1 = sec.numbers("gamma1")
    fM = sec.numbers("fM")
    kernels = sec.raw("kernels", [] if M == 1 else _MISSING)
    if not isinstance(kernels, list):
        raise ConfigError(sec.key("kernels"), "expected a list of matrices")
    if len(kernels) != M - 1:
        raise ConfigError(sec.key("kernels"), f"M={M} needs {M - 1} kernels between thresholds, got {len(kernels)}")
    mats = []
    for i, K in enumerate(kernels):
        key = f"{sec.key('kernels')}[{i}]"
        if not isinstance(K, list) or not K or not all(isinstance(row, list) for row in K):
            raise ConfigError(key, "expected a matrix (list of rows)")
        try:
            mats.append(np.asarray(K, dtype=float))
        except (TypeError, ValueError):
            raise ConfigError(key, "rows must be lists of numbers of equal length") from None
    try:
        return ChainSpec(np.asarray(gamma1), tuple(mats), np.asarray(fM))
    except SplitlabError as exc:
        raise ConfigError(path, str(exc)) from None


def spec_to_json(spec: ChainSpec) -> str:
    return json.dumps(spec_to_dict(spec), indent=2)


def spec_from_json(text: str) -> ChainSpec:
    return spec_from_dict(json.loads(text))


# ---------------------------------------------------------------------- reports and sidecars


def jsonable(obj: Any) -> Any:
    """Convert numpy scalars and arrays (recursively) to plain JSON values."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def report_line(body: dict, timestamp: dict) -> str:
    """One JSON line: the body with sorted keys and a trailing ``timestamp`` member.

    The body is serialized first and the timestamp appended, so bodies of
    repeated runs compare byte for byte once the timestamp is cut off.
    """
    text = json.dumps(jsonable(body), sort_keys=True, separators=(",", ":"))
    stamp = json.dumps(jsonable(timestamp), sort_keys=True, separators=(",", ":"))
    return text[:-1] + ',"timestamp":' + stamp + "}"


def split_report_line(line: str) -> tuple:
    """``(body_text, timestamp)`` of a line written by :func:`report_line`."""
    line = line.rstrip("\n")
    cut = line.rindex(',"timestamp":')
    return line[:cut] + "}", json.loads(line[cut + len(',"timestamp":') : -1])


def append_report(path: str | Path, line: str) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(line + "\n")


def read_reports(path: str | Path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_sidecar(path: str | Path, columns: Sequence[str], rows) -> Path:
    """Tab-separated table with a ``#``-prefixed header naming the columns."""
    path = Path(path)
    arr = np.atleast_2d(np.asarray(rows, dtype=float))
    if arr.size == 0:
        arr = np.empty((0, len(columns)))
    if arr.shape[1] != len(columns):
        raise ValueError(f"{len(columns)} columns named but rows have {arr.shape[1]}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# " + "\t".join(columns) + "\n")
        for row in arr:
            fh.write("\t".join(repr(float(x)) for x in row) + "\n")
    return path


def read_sidecar(path: str | Path) -> tuple:
    """``(columns, rows)`` of a file written by :func:`write_sidecar`."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("# "):
            raise ValueError("missing column header")
        cols = header[2:].rstrip("\n").split("\t")
        rows = [[float(x) for x in line.split("\t")] for line in fh if line.strip()]
    return cols, np.asarray(rows, dtype=float).reshape(-1, len(cols))
