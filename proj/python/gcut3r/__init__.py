"""Guided recurrent pointmap reconstruction (C++ core)."""

from ._core import (
    DEPTH_SCALE,
    SEQUENCE_LENGTH,
    Error,
    Intrinsics,
    Model,
    ModelConfig,
    Pose,
    acc_comp,
    axis_angle,
    depth_metrics,
    encode_depth,
    encode_pose_map,
    encode_rays,
    gen_sequence,
    generate_corpus,
    normal_consistency,
    pointmap_loss,
    pose_loss,
    pose_metrics,
    quat_to_rot,
    relative,
    train,
    umeyama_sim3,
    unproject,
)

__all__ = [name for name in dir() if not name.startswith("_")]
