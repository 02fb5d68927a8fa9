"""Preference learning for the tidiness scorer, plus checkpoint I/O.

The loss over a batch of (tidier, messier) pairs is the mean of
``-log sigmoid(s_tidier - s_messier)``.  Both members of every pair are
stacked into one batch through the shared-weight network, so the gradient
of the shared parameters is the sum of the contributions of both branches.
"""
from __future__ import annotations

import logging
import os
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import nn
from .datagen import Dataset, PreferencePair
from .errors import CorruptCheckpoint, DanglingReference, InvalidArgument
from .oracle import disorder
from .raster import rasterize
from .scene import SceneState
from .scorer import ENCODER_KINDS, ScorerModel, full_architecture, init_params, prepare_inputs

log = logging.getLogger(__name__)

INIT_SCALE = 0.08
SCORE_CHUNK = 512


@dataclass(frozen=True)
class TrainConfig:
    encoder_kind: str = "features"
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 50
    early_stop_patience: int = 5
    val_fraction: float = 0.15
    seed: int = 0

    def __post_init__(self) -> None:
        if self.encoder_kind not in ENCODER_KINDS:
            raise InvalidArgument(f"encoder_kind must be one of {ENCODER_KINDS}")
        if not (0.0 < self.val_fraction < 1.0):
            raise InvalidArgument("val_fraction must lie in (0, 1)")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 1 or self.early_stop_patience < 1:
            raise InvalidArgument("learning_rate, batch_size, max_epochs and early_stop_patience must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


class InputStore:
    """Scene id -> encoder input row, computed once per scene.

    Rows are kept in float16 when that is lossless (raster channels are
    multiples of 1/64), which keeps a desk-scale CNN dataset well under 1 GB.
    Batches come back as float64.
    """

    def __init__(self, scenes: dict[str, SceneState], kind: str):
        self.scenes = scenes
        self.kind = kind
        self._rows: dict[str, int] = {}
        self._data: list[np.ndarray] = []
        self._matrix: np.ndarray | None = None

    def _row(self, scene_id: str) -> int:
        r = self._rows.get(scene_id)
        if r is None:
            try:
                scene = self.scenes[scene_id]
            except KeyError:
                raise DanglingReference(f"pair references unknown scene {scene_id!r}") from None
            row = prepare_inputs(self.kind, [rasterize(scene)])[0]
            small = row.astype(np.float16)
            self._data.append(small if np.array_equal(small, row) else row)
            r = self._rows[scene_id] = len(self._data) - 1
            self._matrix = None
        return r

    def rows(self, scene_ids: Iterable[str]) -> np.ndarray:
        return np.array([self._row(s) for s in scene_ids], dtype=np.int64)

    def batch(self, rows: np.ndarray) -> np.ndarray:
        if self._matrix is None:
            self._matrix = np.stack(self._data)
        return self._matrix[rows].astype(np.float64)


def bt_loss_and_grad(
    kind: str, params: np.ndarray, tidier: np.ndarray, messier: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean Bradley-Terry negative log-likelihood and its parameter gradient."""
    arch = full_architecture(kind)
    b = tidier.shape[0]
    out, cache = nn.forward(arch, params, np.concatenate([tidier, messier]), keep=True)
    diff = out[:b, 0] - out[b:, 0]
    loss = float(-nn.log_sigmoid(diff).mean())
    d_diff = -nn.sigmoid(-diff) / b
    upstream = np.concatenate([d_diff, -d_diff])[:, None]
    return loss, nn.backward(arch, params, cache, upstream)


def bt_loss_value(kind: str, params: np.ndarray, tidier: np.ndarray, messier: np.ndarray):
    """Loss only, as a numpy scalar in the working precision of ``params``."""
    arch = full_architecture(kind)
    b = tidier.shape[0]
    out = nn.forward(arch, params, np.concatenate([tidier, messier]))
    return -nn.log_sigmoid(out[:b, 0] - out[b:, 0]).mean()


def _store_for(model: ScorerModel, scenes) -> InputStore:
    """Accept a Dataset, a plain id -> scene mapping, or a prebuilt InputStore."""
    if isinstance(scenes, InputStore):
        if scenes.kind != model.encoder_kind:
            raise InvalidArgument("input store was built for a different encoder")
        return scenes
    if isinstance(scenes, Dataset):
        return InputStore(scenes.scenes, model.encoder_kind)
    return InputStore(dict(scenes), model.encoder_kind)


def _pair_rows(store: InputStore, pairs: Sequence[PreferencePair]) -> tuple[np.ndarray, np.ndarray]:
    return store.rows(p.tidier for p in pairs), store.rows(p.messier for p in pairs)


def bt_loss(model: ScorerModel, pairs: Sequence[PreferencePair], scenes) -> float:
    """Mean ``-log P[tidier > messier]`` over ``pairs``; ``scenes`` is a Dataset, mapping or InputStore."""
    if not pairs:
        raise InvalidArgument("bt_loss needs a non-empty batch")
    store = _store_for(model, scenes)
    ra, rb = _pair_rows(store, pairs)
    return float(bt_loss_value(model.encoder_kind, model.params, store.batch(ra), store.batch(rb)))


def pair_scores(model: ScorerModel, pairs: Sequence[PreferencePair], scenes) -> tuple[np.ndarray, np.ndarray]:
    store = _store_for(model, scenes)
    ra, rb = _pair_rows(store, pairs)
    uniq, inv = np.unique(np.concatenate([ra, rb]), return_inverse=True)
    s = np.concatenate(
        [model.scores(store.batch(uniq[i : i + SCORE_CHUNK])) for i in range(0, len(uniq), SCORE_CHUNK)]
    )[inv]
    return s[: len(pairs)], s[len(pairs) :]


def pairwise_accuracy(model: ScorerModel, pairs: Sequence[PreferencePair], scenes) -> float:
    """Fraction of pairs where the tidier scene scores higher; exact ties count half."""
    if not pairs:
        raise InvalidArgument("pairwise_accuracy needs at least one pair")
    sa, sb = pair_scores(model, pairs, scenes)
    return float(np.mean(np.where(sa > sb, 1.0, np.where(sa == sb, 0.5, 0.0))))


def split_by_trajectory(trajectories: Sequence[int], val_fraction: float, seed: int) -> tuple[set[int], set[int]]:
    """Disjoint (train, val) trajectory sets, each non-empty."""
    ids = sorted(set(trajectories))
    if len(ids) < 2:
        raise InvalidArgument("need at least two trajectories to split train/validation")
    n_val = min(max(1, int(round(val_fraction * len(ids)))), len(ids) - 1)
    perm = np.random.default_rng([seed, 0x5EED]).permutation(len(ids))
    val = {ids[i] for i in perm[:n_val]}
    return set(ids) - val, val


def held_out_pairs(dataset: Dataset, val_fraction: float = 0.15, seed: int = 0) -> list[PreferencePair]:
    """The validation pairs :func:`train` would hold out for this fraction and seed."""
    _, val = split_by_trajectory(dataset.trajectories, val_fraction, seed)
    return [p for p in dataset.pairs if p.trajectory in val]


def oracle_agreement(model: ScorerModel, pairs: Sequence[PreferencePair], scenes) -> float:
    """Fraction of pairs where the score difference and oracle disorder difference agree in sign.

    Pairs the oracle cannot order are left out; exact score ties count half.
    """
    store = _store_for(model, scenes)
    lookup = store.scenes
    d_a = np.array([disorder(lookup[p.tidier]).total for p in pairs])
    d_b = np.array([disorder(lookup[p.messier]).total for p in pairs])
    keep = d_a != d_b
    if not keep.any():
        raise InvalidArgument("no pair is strictly ordered by the oracle")
    kept = [p for p, k in zip(pairs, keep) if k]
    sa, sb = pair_scores(model, kept, store)
    oracle_sign = np.sign(d_b[keep] - d_a[keep])
    score_sign = np.sign(sa - sb)
    return float(np.mean(np.where(score_sign == 0, 0.5, (score_sign == oracle_sign).astype(float))))


def gap_bucket(pair: PreferencePair) -> str:
    return "3+" if pair.gap >= 3 else str(pair.gap)


def evaluate(model: ScorerModel, pairs: Sequence[PreferencePair], scenes) -> dict:
    """Pairwise accuracy overall, by provenance and by global gap bucket, plus oracle agreement."""
    if not pairs:
        raise InvalidArgument("nothing to evaluate")
    store = _store_for(model, scenes)

    def acc(subset):
        return {"pairs": len(subset), "accuracy": pairwise_accuracy(model, subset, store) if subset else None}

    globals_ = [p for p in pairs if p.provenance == "global"]
    g3 = [p for p in globals_ if p.gap >= 3]
    return {
        "overall": acc(list(pairs)),
        "by_provenance": {prov: acc([p for p in pairs if p.provenance == prov]) for prov in ("global", "local")},
        "by_gap": {b: acc([p for p in globals_ if gap_bucket(p) == b]) for b in ("1", "2", "3+")},
        "oracle_agreement": {"pairs": len(g3), "agreement": oracle_agreement(model, g3, store) if g3 else None},
    }


def train(
    config: TrainConfig,
    dataset: Dataset,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[ScorerModel, list[dict]]:
    """Fit a scorer; returns the best-validation-accuracy model and per-epoch metrics."""
    if not dataset.pairs:
        raise InvalidArgument("cannot train on an empty dataset")
    train_ids, val_ids = split_by_trajectory(dataset.trajectories, config.val_fraction, config.seed)
    train_pairs = [p for p in dataset.pairs if p.trajectory in train_ids]
    val_pairs = [p for p in dataset.pairs if p.trajectory in val_ids]
    kind = config.encoder_kind
    store = InputStore(dataset.scenes, kind)
    ta, tb = _pair_rows(store, train_pairs)
    _pair_rows(store, val_pairs)

    params = init_params(kind, np.random.default_rng([config.seed, 1]), INIT_SCALE)
    state = nn.AdamState.zeros(params.size)
    best = ScorerModel(kind, params)
    best_acc = pairwise_accuracy(best, val_pairs, store)
    history: list[dict] = []
    stale = 0
    n = len(train_pairs)
    for epoch in range(1, config.max_epochs + 1):
        order = np.random.default_rng([config.seed, 2, epoch]).permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, grad = bt_loss_and_grad(kind, params, store.batch(ta[idx]), store.batch(tb[idx]))
            params, state = nn.adam_step(params, grad, state, lr=config.learning_rate)
            total += loss * len(idx)
        model = ScorerModel(kind, params)
        acc = pairwise_accuracy(model, val_pairs, store)
        record = {"epoch": epoch, "train_loss": total / n, "val_accuracy": acc}
        history.append(record)
        log.info("epoch %d loss %.5f val_acc %.4f", epoch, record["train_loss"], acc)
        if on_epoch is not None:
            on_epoch(record)
        if acc > best_acc:
            best, best_acc, stale = model, acc, 0
        else:
            stale += 1
            if stale >= config.early_stop_patience:
                break
    return best, history


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"TDYC"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIBBHQ")
_ENCODER_TAGS = {"features": 0, "cnn": 1}
_HEAD_TAGS = {"bradley-terry": 0}


def checkpoint_bytes(model: ScorerModel) -> bytes:
    header = _HEADER.pack(MAGIC, CHECKPOINT_VERSION, _ENCODER_TAGS[model.encoder_kind], 0, 0, model.params.size)
    body = header + model.params.astype("<f4").tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def model_from_bytes(data: bytes) -> ScorerModel:
    if len(data) < _HEADER.size + 4:
        raise CorruptCheckpoint("checkpoint is truncated")
    magic, version, enc_tag, head_tag, reserved, count = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CorruptCheckpoint(f"bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CorruptCheckpoint(f"unsupported checkpoint version {version}")
    if len(data) != _HEADER.size + 4 * count + 4:
        raise CorruptCheckpoint("checkpoint length does not match its parameter count")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CorruptCheckpoint("checksum mismatch")
    kinds = {v: k for k, v in _ENCODER_TAGS.items()}
    if enc_tag not in kinds or head_tag not in _HEAD_TAGS.values() or reserved != 0:
        raise CorruptCheckpoint(f"unknown encoder/head tag ({enc_tag}, {head_tag})")
    kind = kinds[enc_tag]
    params = np.frombuffer(data, dtype="<f4", count=count, offset=_HEADER.size).astype(np.float64)
    if count != full_architecture(kind).param_count:
        raise CorruptCheckpoint(f"{kind} scorer needs {full_architecture(kind).param_count} parameters, file has {count}")
    if not np.all(np.isfinite(params)):
        raise CorruptCheckpoint("non-finite parameters")
    return ScorerModel(kind, params)


def save_checkpoint(model: ScorerModel, path: str | os.PathLike) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path: str | os.PathLike) -> ScorerModel:
    return model_from_bytes(Path(path).read_bytes())
