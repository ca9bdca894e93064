"""File formats shared by the pipeline stages."""

from vbtactile.pipelineio.keyvalue import read_keyvalue, write_keyvalue
from vbtactile.pipelineio.matrixfile import MatrixFile, read_matrix, write_matrix
from vbtactile.pipelineio.poses import read_poses, write_poses
from vbtactile.pipelineio.recording import FrameRecord, Recording, RecordingHeader, read_recording, write_recording

__all__ = [
    "FrameRecord",
    "Recording",
    "RecordingHeader",
    "read_recording",
    "write_recording",
    "MatrixFile",
    "read_matrix",
    "write_matrix",
    "read_poses",
    "write_poses",
    "read_keyvalue",
    "write_keyvalue",
]
