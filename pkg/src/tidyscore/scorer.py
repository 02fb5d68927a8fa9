"""Siamese tidiness scorer.

Both images of a comparison go through one shared-weight encoder to a
16-dim embedding; a small head maps each embedding to a scalar score
(higher = tidier).  The probability that ``a`` is tidier than ``b`` is the
Bradley-Terry form ``exp(s_a) / (exp(s_a) + exp(s_b)) = sigmoid(s_a - s_b)``.

Two encoders are available:

``features``
    34 hand-computed image features -> dense(34, 32) -> relu -> dense(32, 16)
``cnn``
    conv(3, 8) -> relu -> conv(8, 16) -> relu -> global average pool
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import InvalidArgument
from .raster import MAX_INSTANCE, RasterImage

ENCODER_KINDS = ("features", "cnn")
HEAD_KINDS = ("bradley-terry",)
FEATURE_DIM = 34
EMBED_DIM = 16
PROFILE_BINS = 16

FEATURES_ENCODER = nn.Architecture([nn.dense(FEATURE_DIM, 32), nn.RELU, nn.dense(32, EMBED_DIM)])
CNN_ENCODER = nn.Architecture([nn.conv(3, 8), nn.RELU, nn.conv(8, EMBED_DIM), nn.RELU, nn.GAP])
HEAD = nn.Architecture([nn.dense(EMBED_DIM, 8), nn.RELU, nn.dense(8, 1)])


def encoder_architecture(kind: str) -> nn.Architecture:
    if kind == "features":
        return FEATURES_ENCODER
    if kind == "cnn":
        return CNN_ENCODER
    raise InvalidArgument(f"unknown encoder kind {kind!r}; expected one of {ENCODER_KINDS}")


@functools.lru_cache(maxsize=None)
def full_architecture(kind: str) -> nn.Architecture:
    """Encoder followed by head; parameters are laid out in that order."""
    return encoder_architecture(kind) + HEAD


def param_count(kind: str) -> int:
    return full_architecture(kind).param_count


def geometric_features(image: RasterImage) -> np.ndarray:
    """34 features in ``[0, 1]``: row profile, column profile, occupancy, instance entropy."""
    occ = image[0]
    h, w = occ.shape
    rows = occ.mean(axis=1).reshape(PROFILE_BINS, h // PROFILE_BINS).mean(axis=1)
    cols = occ.mean(axis=0).reshape(PROFILE_BINS, w // PROFILE_BINS).mean(axis=1)
    inst = image[1]
    _, counts = np.unique(inst[inst > 0], return_counts=True)
    entropy = 0.0
    if counts.size > 1:
        p = counts / counts.sum()
        entropy = float(-(p * np.log(p)).sum() / math.log(MAX_INSTANCE + 1))
    return np.concatenate([rows, cols, [occ.mean(), entropy]])


def prepare_inputs(kind: str, images: np.ndarray | list) -> np.ndarray:
    """Stack raster images into the batch the encoder consumes."""
    if kind == "features":
        return np.stack([geometric_features(im) for im in images])
    if kind == "cnn":
        return np.stack([np.asarray(im, dtype=np.float64) for im in images])
    raise InvalidArgument(f"unknown encoder kind {kind!r}")


def init_params(kind: str, rng: np.random.Generator, scale: float = 0.08) -> np.ndarray:
    return rng.uniform(-scale, scale, size=param_count(kind))


@dataclass(frozen=True, eq=False)
class ScorerModel:
    """Encoder kind plus flat parameters.

    Parameters are stored rounded to float32 so that a checkpoint (which
    stores f32) reproduces the model exactly.
    """

    encoder_kind: str
    params: np.ndarray

    def __post_init__(self) -> None:
        arch = full_architecture(self.encoder_kind)
        p = np.asarray(self.params, dtype=np.float32).astype(np.float64)
        if p.ndim != 1 or p.size != arch.param_count:
            raise InvalidArgument(
                f"{self.encoder_kind} scorer needs {arch.param_count} parameters, got {p.size}"
            )
        if not np.all(np.isfinite(p)):
            raise InvalidArgument("scorer parameters must be finite")
        p.setflags(write=False)
        object.__setattr__(self, "params", p)

    @classmethod
    def zeros(cls, kind: str = "features") -> ScorerModel:
        return cls(kind, np.zeros(param_count(kind)))

    @property
    def architecture(self) -> nn.Architecture:
        return full_architecture(self.encoder_kind)

    def split(self) -> tuple[np.ndarray, np.ndarray]:
        n = encoder_architecture(self.encoder_kind).param_count
        return self.params[:n], self.params[n:]

    def scores(self, inputs: np.ndarray) -> np.ndarray:
        """Scores for an already prepared batch (see :func:`prepare_inputs`)."""
        return nn.forward(self.architecture, self.params, inputs)[:, 0]


def encode(model: ScorerModel, image: RasterImage) -> np.ndarray:
    enc, _ = model.split()
    x = prepare_inputs(model.encoder_kind, [image])
    return nn.forward(encoder_architecture(model.encoder_kind), enc, x)[0]


def score(model: ScorerModel, image: RasterImage) -> float:
    return float(model.scores(prepare_inputs(model.encoder_kind, [image]))[0])


def score_images(model: ScorerModel, images: list) -> np.ndarray:
    if not len(images):
        return np.zeros(0)
    return model.scores(prepare_inputs(model.encoder_kind, images))


def pair_prob(model: ScorerModel, image_a: RasterImage, image_b: RasterImage) -> float:
    """Probability that ``image_a`` is the tidier of the two."""
    s = score_images(model, [image_a, image_b])
    return float(nn.sigmoid(s[0] - s[1]))
