"""Frame-by-frame chain from marker displacements to a friction-coloured cloud."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from vbtactile.contact import compression, estimate_normals
from vbtactile.elasticity import from_blocks, to_blocks
from vbtactile.forcesolve import SolveKernel
from vbtactile.friction import FrictionCloud, FrictionParams, SlipSamples, collect_slip_samples, detect_slip, smooth_mu
from vbtactile.mapping import GlobalCloud, SensorPose, accumulate, to_global, voxel_resample

__all__ = ["FrameInput", "FrameResult", "Reconstruction", "process_frame", "reconstruct"]


@dataclass(frozen=True)
class FrameInput:
    index: int
    rest: np.ndarray  # (N, 3) sensor frame
    displacements: np.ndarray  # (N, 3)
    pose: SensorPose
    timestamp: float = 0.0


@dataclass(frozen=True)
class FrameResult:
    index: int
    forces: np.ndarray  # (N, 3) sensor frame
    normals: np.ndarray  # outward, sensor frame
    compression: np.ndarray
    contact: np.ndarray
    global_positions: np.ndarray
    slip: np.ndarray


@dataclass
class Reconstruction:
    frames: list = field(default_factory=list)
    samples: SlipSamples = field(default_factory=SlipSamples.empty)
    raw_cloud: GlobalCloud = field(default_factory=GlobalCloud.empty)
    cloud: GlobalCloud = field(default_factory=GlobalCloud.empty)
    friction: FrictionCloud | None = None


def process_frame(kernel: SolveKernel, frame: FrameInput, threshold: float, forces=None) -> FrameResult:
    """Forces, normals and contact for one frame (no slip yet).

    ``forces`` (N, 3) skips the inversion when already known.
    """
    if forces is None:
        forces = from_blocks(kernel.K @ to_blocks(frame.displacements))
    positions = frame.rest + frame.displacements
    normals = estimate_normals(positions, k=min(9, len(positions))).normals
    comp = compression(forces, normals)
    contact = comp >= threshold
    return FrameResult(frame.index, forces, normals, comp, contact, to_global(positions, frame.pose),
                       np.zeros(len(positions), dtype=bool))


def reconstruct(kernel: SolveKernel, frames, threshold: float, params: FrictionParams = FrictionParams(),
                voxel_edge=0.5, forces=None) -> Reconstruction:
    """Run the whole chain over an ordered frame sequence.

    Contact markers of every frame are accumulated in the global frame and
    voxel-resampled; slip markers between consecutive frames provide the
    friction samples smoothed onto the resampled points.
    """
    out = Reconstruction()
    prev = None
    for k, fr in enumerate(frames):
        res = process_frame(kernel, fr, threshold, None if forces is None else forces[k])
        if prev is not None:
            slip = detect_slip(prev.global_positions, res.global_positions, prev.contact, res.contact,
                               params.slip_threshold)
            res = FrameResult(res.index, res.forces, res.normals, res.compression, res.contact,
                              res.global_positions, slip)
            if np.any(slip):
                s = collect_slip_samples(res.global_positions, res.forces, -res.normals, slip, res.index)
                out.samples = out.samples.concat(s)
        if np.any(res.contact):
            out.raw_cloud = accumulate(out.raw_cloud, res.global_positions[res.contact], res.index)
        out.frames.append(res)
        prev = res
    out.cloud = voxel_resample(out.raw_cloud, voxel_edge)
    out.friction = smooth_mu(out.cloud.points, out.samples, params)
    out.cloud = out.cloud.with_mu(out.friction.mu)
    return out
