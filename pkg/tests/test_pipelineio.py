import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from vbtactile.errors import IoFailure, ParseError, VersionMismatch
from vbtactile.mapping import SensorPose
from vbtactile.pipelineio import (
    FrameRecord, MatrixFile, Recording, RecordingHeader, read_keyvalue, read_matrix, read_poses,
    read_recording, write_keyvalue, write_matrix, write_poses, write_recording,
)
from vbtactile.pipelineio.keyvalue import format_keyvalue, parse_keyvalue


def _recording(n_frames, rows=3, cols=4, seed=0, forces=True):
    rng = np.random.default_rng(seed)
    n = rows * cols
    header = RecordingHeader(rows, cols, 1.27, "0123456789abcdef", "h.bin", "run.poses")
    rec = Recording(header)
    for k in range(n_frames):
        rec.frames.append(FrameRecord(
            2 * k, k / 24.0, rng.normal(0, 10, (n, 3)), rng.normal(0, 0.1, (n, 3)),
            rng.normal(0, 0.05, (n, 3)) if forces else None,
            rng.random(n) < 0.3 if forces else None,
            rng.random(n) < 0.1 if forces else None))
    return rec


def _same(a: Recording, b: Recording):
    assert (a.header.rows, a.header.cols, a.header.spacing, a.header.geometry) == \
           (b.header.rows, b.header.cols, b.header.spacing, b.header.geometry)
    assert len(a.frames) == len(b.frames)
    for fa, fb in zip(a.frames, b.frames):
        assert fa.index == fb.index and fa.timestamp == fb.timestamp
        assert fa.positions.tobytes() == fb.positions.tobytes()
        assert fa.displacements.tobytes() == fb.displacements.tobytes()
        for name in ("forces", "contact", "slip"):
            x, y = getattr(fa, name), getattr(fb, name)
            assert (x is None and y is None) or np.array_equal(x, y)


def test_empty_recording_round_trip(tmp_path):
    rec = Recording(RecordingHeader(20, 20))
    write_recording(tmp_path / "r.rec", rec)
    back = read_recording(tmp_path / "r.rec")
    assert back.frames == [] and back.header.n_markers == 400


def test_hundred_frames_bitwise(tmp_path):
    rec = _recording(100)
    write_recording(tmp_path / "r.rec", rec)
    back = read_recording(tmp_path / "r.rec")
    _same(rec, back)
    assert back.header.hfile == "h.bin" and back.header.poses == "run.poses"


def test_displacement_only_recording(tmp_path):
    rec = _recording(3, forces=False)
    write_recording(tmp_path / "r.rec", rec)
    back = read_recording(tmp_path / "r.rec")
    _same(rec, back)
    assert back.header.columns == ("x", "y", "z", "dx", "dy", "dz")


def test_truncated_file_names_frame(tmp_path):
    path = tmp_path / "r.rec"
    write_recording(path, _recording(5))
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-8]) + "\n")  # cut inside the last frame
    with pytest.raises(ParseError) as info:
        read_recording(path)
    assert info.value.frame == 8 and "frame 8" in str(info.value)
    # missing terminator only
    path.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(ParseError):
        read_recording(path)


def test_bad_number_located(tmp_path):
    path = tmp_path / "r.rec"
    write_recording(path, _recording(2))
    lines = path.read_text().splitlines()
    k = lines.index("frame 2 0.041666666666666664")
    parts = lines[k + 2].split()
    parts[4] = "oops"
    lines[k + 2] = " ".join(parts)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError) as info:
        read_recording(path)
    assert info.value.frame == 2 and info.value.line == k + 3 and info.value.field == "dy"


def test_version_mismatch(tmp_path):
    path = tmp_path / "r.rec"
    write_recording(path, _recording(1))
    text = path.read_text().replace("vbtactile-recording 1", "vbtactile-recording 9", 1)
    path.write_text(text)
    with pytest.raises(VersionMismatch):
        read_recording(path)


def test_unknown_fields_preserved(tmp_path):
    rec = _recording(2)
    rec.header.extra.append("operator bench-7")
    for fr in rec.frames:
        fr.extra["temperature"] = [f"{20 + i * 0.5}" for i in range(12)]
        fr.tail = ("exposure=4ms",)
    path = tmp_path / "r.rec"
    write_recording(path, rec)
    back = read_recording(path)
    assert back.header.extra == ["operator bench-7"]
    assert back.frames[1].extra["temperature"] == rec.frames[1].extra["temperature"]
    assert back.frames[0].tail == ("exposure=4ms",)
    assert back.frames[0].column("temperature")[2] == 21.0
    write_recording(tmp_path / "again.rec", back)
    assert (tmp_path / "again.rec").read_text() == path.read_text()


def test_recording_validation(tmp_path):
    rec = _recording(2)
    rec.frames[1].index = 0
    with pytest.raises(ValueError):
        write_recording(tmp_path / "r.rec", rec)
    rec = _recording(1)
    rec.frames[0].positions = np.zeros((5, 3))
    with pytest.raises(ValueError):
        write_recording(tmp_path / "r.rec", rec)
    with pytest.raises(IoFailure):
        read_recording(tmp_path / "absent.rec")


def test_matrix_round_trip(tmp_path):
    A = np.random.default_rng(1).normal(size=(12, 12))
    write_matrix(tmp_path / "h.bin", MatrixFile(A, "K", 2, 2, 0.125, "feedfacecafebeef"))
    mf = read_matrix(tmp_path / "h.bin")
    assert mf.matrix.tobytes() == A.tobytes()
    assert (mf.kind, mf.rows, mf.cols, mf.w, mf.geometry, mf.n_markers) == \
           ("K", 2, 2, 0.125, "feedfacecafebeef", 4)


def test_matrix_corruption_detected(tmp_path):
    path = tmp_path / "h.bin"
    write_matrix(path, MatrixFile(np.eye(6)))
    raw = bytearray(path.read_bytes())
    flipped = raw.copy()
    flipped[100] ^= 0x01
    path.write_bytes(bytes(flipped))
    with pytest.raises(ParseError, match="checksum"):
        read_matrix(path)
    path.write_bytes(bytes(raw[:-20]))
    with pytest.raises(ParseError):
        read_matrix(path)
    bad_magic = raw.copy()
    bad_magic[0:1] = b"X"
    path.write_bytes(bytes(bad_magic))
    with pytest.raises(ParseError):
        read_matrix(path)
    newer = raw.copy()
    newer[8:12] = struct.pack("<I", 2)
    path.write_bytes(bytes(newer))
    with pytest.raises(VersionMismatch):
        read_matrix(path)
    with pytest.raises(ValueError):
        write_matrix(path, MatrixFile(np.eye(4)))


def test_pose_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    poses = [SensorPose(Rotation.random(random_state=k).as_matrix(), rng.normal(0, 50, 3), k / 24)
             for k in range(20)]
    poses.append(SensorPose(np.diag([1.0, -1.0, -1.0]), [1.0, 2.0, 8.0], 1.0))
    path = tmp_path / "p.txt"
    write_poses(path, poses, indices=range(5, 26))
    idx, back = read_poses(path)
    assert idx == list(range(5, 26))
    for a, b in zip(poses, back):
        assert np.allclose(a.R, b.R, atol=1e-12)
        assert np.array_equal(a.t, b.t) and a.timestamp == b.timestamp


def test_pose_file_errors(tmp_path):
    path = tmp_path / "p.txt"
    path.write_text("version 1\n0 0.0 1 2 3 1 0 0\n")
    with pytest.raises(ParseError) as info:
        read_poses(path)
    assert info.value.line == 2
    path.write_text("version 1\n0 0.0 1 2 3 2 0 0 0\n")
    with pytest.raises(ParseError):
        read_poses(path)
    path.write_text("version 3\n")
    with pytest.raises(VersionMismatch):
        read_poses(path)
    path.write_text("# comment only\n0 0.0 1 2 3 1 0 0 0\n")
    with pytest.raises(ParseError):
        read_poses(path)


def test_keyvalue_round_trip(tmp_path):
    items = {"n_markers": 400, "ratio": 0.1 + 0.2, "flag": True, "shape": (3, 4), "name": "sensor"}
    write_keyvalue(tmp_path / "r.txt", items)
    back = read_keyvalue(tmp_path / "r.txt")
    assert float(back["ratio"]) == 0.1 + 0.2
    assert back["flag"] == "true" and back["shape"] == "3 4" and back["n_markers"] == "400"
    with pytest.raises(ValueError):
        format_keyvalue({"bad key": 1})
    with pytest.raises(ParseError):
        parse_keyvalue("no separator here\n")


@settings(max_examples=100, deadline=None)
@given(st.floats(allow_nan=False, allow_infinity=False))
def test_keyvalue_floats_are_exact(x):
    assert float(parse_keyvalue(format_keyvalue({"v": x}))["v"]) == x
