"""The extraction pipeline: images in, binary feature files out.

Per image: resize to the 600x400 canvas, split into the 4x4 tile grid,
run every backbone over the tiles (average-pooled, 2048-wide with the
densenet zero pad) for the tiled layout, and over the whole canvas
(max-pooled, 8064-long concatenation) for the whole layout.  Output goes
through the engine's feature-file writer, so every emitted record passes
its validators by construction.

Undecodable images are recorded as failures and skipped; the job
continues with the rest.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from visaff.dataset import (
    DENSENET_ROW,
    FEATURE_DIM,
    N_MODELS,
    N_SUBIMAGES,
    FeatureTensor,
    write_features,
)

from .backbones import BACKBONE_ORDER, build_backbones
from .tiling import load_image, tile_image

IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png", ".bmp")


@dataclass
class ExtractionJob:
    image_dir: str
    out_tiled: str | None = None
    out_whole: str | None = None
    batch_size: int = 16
    backend: str = "keras"
    weights: str = "imagenet"  # "random" builds untrained backbones
    stub_seed: int = 0

    def validate(self):
        if self.out_tiled is None and self.out_whole is None:
            raise ValueError("job needs at least one of out_tiled / out_whole")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        return self


@dataclass
class ExtractionReport:
    processed: list = field(default_factory=list)
    failures: list = field(default_factory=list)  # (image_id, reason)


def list_images(image_dir):
    """(image_id, path) pairs sorted by id; id is the file name stem."""
    entries = []
    for name in sorted(os.listdir(image_dir)):
        stem, ext = os.path.splitext(name)
        if ext.lower() in IMAGE_EXTENSIONS:
            entries.append((stem, os.path.join(image_dir, name)))
    ids = [e[0] for e in entries]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate image ids (same stem) in {image_dir}")
    return entries


def extract_tiled_record(image_id, image, backbones, batch_size=16):
    tiles = tile_image(image)
    values = np.zeros((N_MODELS, N_SUBIMAGES, FEATURE_DIM), dtype=np.float32)
    for m, backbone in enumerate(backbones):
        feats = backbone.features(list(tiles), pool="avg", batch_size=batch_size)
        if feats.shape != (N_SUBIMAGES, backbone.dim):
            raise ValueError(
                f"{backbone.name}: expected ({N_SUBIMAGES}, {backbone.dim}), "
                f"got {feats.shape}"
            )
        values[m, :, : backbone.dim] = feats
    values[DENSENET_ROW, :, backbones[DENSENET_ROW].dim :] = 0.0
    return FeatureTensor(image_id, "tiled", values)


def extract_whole_record(image_id, image, backbones):
    parts = []
    for backbone in backbones:
        feat = backbone.features([image], pool="max", batch_size=1)[0]
        if feat.shape != (backbone.dim,):
            raise ValueError(
                f"{backbone.name}: expected ({backbone.dim},), got {feat.shape}"
            )
        parts.append(feat)
    return FeatureTensor(image_id, "whole", np.concatenate(parts))


def run_extraction(job):
    """Execute the job; returns an ExtractionReport listing any failures."""
    job.validate()
    entries = list_images(job.image_dir)
    backbones = build_backbones(job.backend, weights=job.weights,
                                stub_seed=job.stub_seed)
    assert tuple(b.name for b in backbones) == BACKBONE_ORDER
    report = ExtractionReport()
    tiled_records, whole_records = [], []
    for image_id, path in entries:
        try:
            image = load_image(path)
        except Exception as exc:  # undecodable file: record and continue
            report.failures.append((image_id, str(exc)))
            continue
        if job.out_tiled is not None:
            tiled_records.append(
                extract_tiled_record(image_id, image, backbones, job.batch_size)
            )
        if job.out_whole is not None:
            whole_records.append(extract_whole_record(image_id, image, backbones))
        report.processed.append(image_id)
    if job.out_tiled is not None:
        write_features(job.out_tiled, tiled_records, layout="tiled")
    if job.out_whole is not None:
        write_features(job.out_whole, whole_records, layout="whole")
    return report
