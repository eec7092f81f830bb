"""The four fixed feature backbones and a deterministic stub stand-in.

Backbone order and per-backbone feature widths are fixed by the feature
file contract: inception (2048), xception (2048), resnet (2048),
densenet (1920).  Keras backbones expose the post-convolutional feature
map and pool it here, so one model instance serves both the tiled path
(global average pooling of upscaled tiles) and the whole-image path
(global max pooling at native canvas size).

The stub backend is a frozen seeded projection of a downsampled image;
it produces the same shapes and determinism guarantees without loading
tensorflow, and exists for fast pipeline tests and offline runs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from PIL import Image

BACKBONE_ORDER = ("inception", "xception", "resnet", "densenet")

_SPECS = {
    # name: (feature width, square input size for tiles)
    "inception": (2048, 299),
    "xception": (2048, 299),
    "resnet": (2048, 224),
    "densenet": (1920, 224),
}


def backbone_dims():
    return tuple(_SPECS[name][0] for name in BACKBONE_ORDER)


def _resize_batch(images, size):
    out = np.empty((len(images), size, size, 3), dtype=np.float32)
    for i, img in enumerate(images):
        pil = Image.fromarray(np.asarray(img, dtype=np.uint8))
        out[i] = np.asarray(pil.resize((size, size), Image.BILINEAR), dtype=np.float32)
    return out


class KerasBackbone:
    """Wraps one pretrained (or randomly initialized) keras application."""

    def __init__(self, name, weights="imagenet"):
        if name not in _SPECS:
            raise ValueError(f"unknown backbone {name!r}")
        self.name = name
        self.dim, self.tile_input = _SPECS[name]
        kw = None if weights in (None, "random") else weights
        from tensorflow import keras  # heavyweight; imported on first use

        apps = keras.applications
        builders = {
            "inception": (apps.InceptionV3, apps.inception_v3.preprocess_input),
            "xception": (apps.Xception, apps.xception.preprocess_input),
            "resnet": (apps.ResNet50, apps.resnet50.preprocess_input),
            "densenet": (apps.DenseNet201, apps.densenet.preprocess_input),
        }
        builder, self._preprocess = builders[name]
        self._model = builder(include_top=False, weights=kw, pooling=None,
                              input_shape=None)

    def features(self, images, pool, batch_size=16):
        """Pooled feature vectors for a list of same-sized RGB uint8 arrays."""
        if pool not in ("avg", "max"):
            raise ValueError(f"unknown pooling {pool!r}")
        if pool == "avg":  # tiled path: upscale to the backbone's native size
            batch = _resize_batch(images, self.tile_input)
        else:  # whole path: shape-agnostic, native canvas resolution
            batch = np.asarray(images, dtype=np.float32)
        batch = self._preprocess(batch)
        fmap = self._model.predict(batch, batch_size=batch_size, verbose=0)
        reducer = np.mean if pool == "avg" else np.max
        return reducer(fmap, axis=(1, 2)).astype(np.float32)


@dataclass
class StubBackbone:
    """Deterministic shape-compatible stand-in (no tensorflow).

    Projects a bilinearly downsampled 16x16 copy of the image through a
    frozen seeded gaussian matrix; tanh keeps outputs bounded.
    """

    name: str
    seed: int = 0

    def __post_init__(self):
        if self.name not in _SPECS:
            raise ValueError(f"unknown backbone {self.name!r}")
        self.dim = _SPECS[self.name][0]
        digest = hashlib.sha256(self.name.encode("ascii")).digest()
        entropy = int.from_bytes(digest[:8], "little")
        rng = np.random.default_rng(
            np.random.SeedSequence([self.seed & ((1 << 64) - 1), entropy])
        )
        self._proj = rng.normal(0.0, 1.0 / np.sqrt(768), (768, self.dim))

    def features(self, images, pool, batch_size=16):
        if pool not in ("avg", "max"):
            raise ValueError(f"unknown pooling {pool!r}")
        small = _resize_batch(images, 16) / 255.0 - 0.5
        flat = small.reshape(len(small), -1)
        return np.tanh(flat @ self._proj).astype(np.float32)


def build_backbones(backend="keras", weights="imagenet", stub_seed=0):
    """The four backbones in their fixed order."""
    if backend == "keras":
        return [KerasBackbone(name, weights=weights) for name in BACKBONE_ORDER]
    if backend == "stub":
        return [StubBackbone(name, seed=stub_seed) for name in BACKBONE_ORDER]
    raise ValueError(f"unknown backend {backend!r}")
