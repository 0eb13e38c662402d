"""Offline image feature extraction emitting VGNF files."""

from .extract import (
    ExtractError,
    ImageManifest,
    build_trunk,
    debug_mean_trunk,
    extract,
    preprocess,
    read_manifest,
    write_vgnf,
)

__version__ = "0.1.0"
