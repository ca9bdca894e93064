"""Line-oriented frame recordings.

Example::

    vbtactile-recording 1
    grid 20 20
    spacing 1.27
    geometry 3f0c9a1b2d4e5f60
    hfile h.bin
    poses poses.txt
    columns x y z dx dy dz fx fy fz contact slip
    frame 0 0.0
    <x> <y> <z> <dx> <dy> <dz> <fx> <fy> <fz> <0|1> <0|1>
    ...
    end

Floats are written with ``repr`` so values round trip exactly.  Header
lines with unknown keys, extra columns and extra tokens after ``frame``
are kept verbatim.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from vbtactile.errors import IoFailure, ParseError, VersionMismatch

__all__ = ["VERSION", "RecordingHeader", "FrameRecord", "Recording", "write_recording", "read_recording"]

VERSION = 1
MAGIC = "vbtactile-recording"
_POS = ("x", "y", "z")
_DISP = ("dx", "dy", "dz")
_FORCE = ("fx", "fy", "fz")
_FLAGS = ("contact", "slip")
_KNOWN = set(_POS + _DISP + _FORCE + _FLAGS)


@dataclass
class RecordingHeader:
    rows: int
    cols: int
    spacing: float = 1.27
    geometry: str = ""
    hfile: str = "-"
    poses: str = "-"
    columns: tuple = _POS + _DISP
    extra: list = field(default_factory=list)  # verbatim unknown header lines

    @property
    def n_markers(self) -> int:
        return self.rows * self.cols

    @property
    def extra_columns(self) -> tuple:
        return tuple(c for c in self.columns if c not in _KNOWN)


@dataclass
class FrameRecord:
    index: int
    timestamp: float
    positions: np.ndarray
    displacements: np.ndarray
    forces: np.ndarray | None = None
    contact: np.ndarray | None = None
    slip: np.ndarray | None = None
    extra: dict = field(default_factory=dict)  # column name -> list of str
    tail: tuple = ()  # extra tokens on the frame line

    def column(self, name):
        """Extra column parsed as floats."""
        return np.array([float(v) for v in self.extra[name]])


@dataclass
class Recording:
    header: RecordingHeader
    frames: list = field(default_factory=list)

    def validate(self):
        n = self.header.n_markers
        last = None
        for fr in self.frames:
            if fr.positions.shape != (n, 3) or fr.displacements.shape != (n, 3):
                raise ValueError(f"frame {fr.index} has {len(fr.positions)} markers, header says {n}")
            if last is not None and fr.index <= last:
                raise ValueError(f"frame index {fr.index} does not increase")
            last = fr.index


def _columns_for(rec: Recording):
    cols = list(rec.header.columns)
    if rec.frames:
        f0 = rec.frames[0]
        want = list(_POS + _DISP)
        if f0.forces is not None:
            want += _FORCE
        if f0.contact is not None:
            want.append("contact")
        if f0.slip is not None:
            want.append("slip")
        want += [c for c in cols if c not in _KNOWN]
        want += [c for c in f0.extra if c not in want]
        cols = want
    return tuple(cols)


def write_recording(path, rec: Recording):
    """Write ``rec``; ``rec.header.columns`` is updated to the written schema."""
    rec.validate()
    h = rec.header
    cols = _columns_for(rec)
    h.columns = cols
    out = [f"{MAGIC} {VERSION}", f"grid {h.rows} {h.cols}", f"spacing {h.spacing!r}",
           f"geometry {h.geometry or '-'}", f"hfile {h.hfile}", f"poses {h.poses}"]
    out += h.extra
    out.append("columns " + " ".join(cols))
    for fr in rec.frames:
        out.append(" ".join([f"frame {fr.index} {float(fr.timestamp)!r}", *fr.tail]))
        parts = []
        for c in cols:
            if c in _POS:
                parts.append([repr(float(v)) for v in fr.positions[:, _POS.index(c)]])
            elif c in _DISP:
                parts.append([repr(float(v)) for v in fr.displacements[:, _DISP.index(c)]])
            elif c in _FORCE:
                parts.append([repr(float(v)) for v in fr.forces[:, _FORCE.index(c)]])
            elif c in _FLAGS:
                parts.append(["1" if v else "0" for v in getattr(fr, c)])
            else:
                parts.append([str(v) for v in fr.extra[c]])
        out.extend(" ".join(row) for row in zip(*parts))
    out.append("end")
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(out) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _float(tok, line, fld, frame):
    try:
        return float(tok)
    except ValueError:
        raise ParseError(f"bad number {tok!r}", line=line, field=fld, frame=frame) from None


def read_recording(path) -> Recording:
    """Parse a recording.

    Raises
    ------
    ParseError
        Malformed or truncated content; the message names the frame, line
        and field where parsing stopped.
    VersionMismatch
        Unsupported format version.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if not lines:
        raise ParseError("empty file", line=1)
    first = lines[0].split()
    if len(first) != 2 or first[0] != MAGIC:
        raise ParseError("not a recording", line=1, field="magic")
    if first[1] != str(VERSION):
        raise VersionMismatch(f"recording version {first[1]}, expected {VERSION}")
    meta = {}
    extra = []
    pos = 1
    while pos < len(lines):
        s = lines[pos]
        key = s.split(" ", 1)[0]
        if key == "columns":
            meta["columns"] = tuple(s.split()[1:])
            pos += 1
            break
        if key in ("grid", "spacing", "geometry", "hfile", "poses"):
            meta[key] = s.split()[1:]
        else:
            extra.append(s)
        pos += 1
    else:
        raise ParseError("header has no columns line", line=pos)
    try:
        rows, cols = (int(v) for v in meta["grid"])
        spacing = float(meta.get("spacing", ["1.27"])[0])
    except (KeyError, ValueError):
        raise ParseError("missing or malformed grid/spacing", field="grid") from None
    geometry = meta.get("geometry", ["-"])[0]
    header = RecordingHeader(rows, cols, spacing, "" if geometry == "-" else geometry,
                             meta.get("hfile", ["-"])[0], meta.get("poses", ["-"])[0],
                             meta["columns"], extra)
    columns = header.columns
    n = header.n_markers
    rec = Recording(header)
    ended = False
    while pos < len(lines):
        s = lines[pos]
        lineno = pos + 1
        if s == "end":
            ended = True
            break
        tok = s.split()
        if not tok or tok[0] != "frame" or len(tok) < 3:
            raise ParseError("expected frame line", line=lineno)
        try:
            index = int(tok[1])
        except ValueError:
            raise ParseError("bad frame index", line=lineno, field="frame") from None
        ts = _float(tok[2], lineno, "timestamp", index)
        body = lines[pos + 1:pos + 1 + n]
        if len(body) < n or any(b == "end" or b.startswith("frame ") for b in body):
            raise ParseError(f"truncated: frame has fewer than {n} marker lines", line=lineno, frame=index)
        table = []
        for k, b in enumerate(body):
            parts = b.split()
            if len(parts) != len(columns):
                raise ParseError(f"expected {len(columns)} values, got {len(parts)}",
                                 line=lineno + 1 + k, frame=index)
            table.append(parts)
        cols_t = list(zip(*table)) if table else [() for _ in columns]

        def numeric(names, _cols=cols_t, _lineno=lineno, _index=index):
            out = np.zeros((n, len(names)))
            for j, c in enumerate(names):
                vals = _cols[columns.index(c)]
                for i, v in enumerate(vals):
                    out[i, j] = _float(v, _lineno + 1 + i, c, _index)
            return out

        def flags(name, _cols=cols_t, _lineno=lineno, _index=index):
            vals = _cols[columns.index(name)]
            bad = [i for i, v in enumerate(vals) if v not in ("0", "1")]
            if bad:
                raise ParseError("flag must be 0 or 1", line=_lineno + 1 + bad[0], field=name, frame=_index)
            return np.array([v == "1" for v in vals], dtype=bool)

        for req in _POS + _DISP:
            if req not in columns:
                raise ParseError("required column missing", field=req)
        fr = FrameRecord(
            index, ts, numeric(_POS), numeric(_DISP),
            numeric(_FORCE) if all(c in columns for c in _FORCE) else None,
            flags("contact") if "contact" in columns else None,
            flags("slip") if "slip" in columns else None,
            {c: list(cols_t[columns.index(c)]) for c in header.extra_columns},
            tuple(tok[3:]),
        )
        if rec.frames and index <= rec.frames[-1].index:
            raise ParseError("frame index does not increase", line=lineno, frame=index)
        rec.frames.append(fr)
        pos += 1 + n
    if not ended:
        last = rec.frames[-1].index if rec.frames else None
        raise ParseError("missing end marker (file truncated)", line=len(lines), frame=last)
    return rec
