"""Continual spatio-temporal graph convolutional networks for skeleton streams."""
from .graph import SkeletonGraph, adjacency_set, build_skeleton, partition
from .io import WeightStore, derive_modality, fuse_scores, load_weights, read_clip, save_weights, write_clip
from .network import (Model, NetworkConfig, Prediction, convert, forward_clip, forward_step, init_random,
                      init_stream, preset, reduced_preset, total_delay)

__version__ = "0.1.0"
