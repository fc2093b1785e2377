"""Siamese intra-modal similarity networks and the contrastive loss.

The learned "similarity" is a squared Euclidean distance between embeddings,
so smaller values mean more alike. Same-class pairs are pulled to zero and
different-class pairs pushed beyond a margin.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, ShapeError
from .nn_core import MLP, OptimizerState, Rng, init_params, optimizer_step

log = logging.getLogger(__name__)

IMAGE = "image"
TEXT = "text"
MODALITIES = (IMAGE, TEXT)


@dataclass
class SimilarityNet:
    net: MLP
    modality: str

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")

    @property
    def input_dim(self) -> int:
        return self.net.input_dim

    def embed(self, x):
        return self.net.forward(np.atleast_2d(x))


def build_similarity_net(input_dim, modality, hidden=(128, 128), d_sim=32, rng=None):
    net = MLP.build([input_dim, *hidden, d_sim], hidden="relu", output="identity")
    if rng is not None:
        init_params(net, rng)
    return SimilarityNet(net, modality)


@dataclass
class PairBatch:
    left: np.ndarray
    right: np.ndarray
    same_class: np.ndarray

    def __post_init__(self):
        self.left = np.atleast_2d(np.asarray(self.left, dtype=np.float64))
        self.right = np.atleast_2d(np.asarray(self.right, dtype=np.float64))
        self.same_class = np.asarray(self.same_class, dtype=np.float64).reshape(-1)
        if self.left.shape != self.right.shape:
            raise ShapeError("left and right pair members differ in shape")
        if self.same_class.shape[0] != self.left.shape[0]:
            raise ShapeError("same_class length does not match batch size")
        if not np.all((self.same_class == 0) | (self.same_class == 1)):
            raise InputError("same_class entries must be 0 or 1")

    def __len__(self):
        return self.left.shape[0]


def intra_distance(h: SimilarityNet, x_i, x_j) -> float:
    x_i = np.asarray(x_i, dtype=np.float64).reshape(1, -1)
    x_j = np.asarray(x_j, dtype=np.float64).reshape(1, -1)
    if x_i.shape[1] != h.input_dim or x_j.shape[1] != h.input_dim:
        raise ShapeError(f"expected vectors of length {h.input_dim}")
    e = h.embed(np.vstack([x_i, x_j]))
    d = e[0] - e[1]
    return float(d @ d)


def pair_distances(h: SimilarityNet, left, right):
    """Squared embedding distance per row, plus a closure mapping d(loss)/d(s) to param grads.

    The closure must be called before ``h`` sees another forward pass.
    """
    left = np.atleast_2d(left)
    b = left.shape[0]
    e = h.net.forward(np.vstack([left, np.atleast_2d(right)]))
    diff = e[:b] - e[b:]
    s = np.einsum("ij,ij->i", diff, diff)

    def backward(ds):
        de = 2.0 * diff * ds[:, None]
        grads, _ = h.net.backward(np.vstack([de, -de]))
        return grads

    return s, backward


def contrastive_terms(s, same_class, margin: float = 1.0):
    """Mean contrastive loss over pairs and its derivative w.r.t. each distance."""
    if margin <= 0:
        raise ValueError("margin must be positive")
    s = np.asarray(s, dtype=np.float64)
    u = np.asarray(same_class, dtype=np.float64)
    gap = margin - s
    active = gap > 0.0
    per_pair = u * s + (1.0 - u) * np.where(active, gap, 0.0)
    ds = (u - (1.0 - u) * active) / len(s)
    return float(per_pair.mean()), ds


def contrastive_loss(h: SimilarityNet, batch: PairBatch, margin: float = 1.0) -> float:
    s, _ = pair_distances(h, batch.left, batch.right)
    # drop the cache so a stray backward() fails loudly
    for layer in h.net.layers:
        layer._x = layer._z = layer._a = None
    return contrastive_terms(s, batch.same_class, margin)[0]


def contrastive_loss_and_grads(h: SimilarityNet, batch: PairBatch, margin: float = 1.0):
    s, backward = pair_distances(h, batch.left, batch.right)
    loss, ds = contrastive_terms(s, batch.same_class, margin)
    return loss, backward(ds)


class PairSampler:
    """Draws balanced same-class / different-class pairs from a labelled set."""

    def __init__(self, labels):
        labels = np.asarray(labels).reshape(-1)
        if labels.size == 0:
            raise InputError("cannot sample pairs from an empty dataset")
        classes = np.unique(labels)
        if classes.size < 2:
            raise InputError("need at least two classes to form negative pairs")
        self.labels = labels
        self._members = {c: np.flatnonzero(labels == c) for c in classes}
        self._others = {c: np.flatnonzero(labels != c) for c in classes}
        multi = [m for m in self._members.values() if m.size >= 2]
        self._pos_anchors = np.concatenate(multi) if multi else np.arange(labels.size)

    def sample(self, batch_size, positive_fraction, rng):
        """Return index arrays ``(left, right, same_class)``."""
        if batch_size < 1:
            raise InputError("batch_size must be at least 1")
        if not 0.0 < positive_fraction < 1.0:
            raise InputError("positive_fraction must lie strictly between 0 and 1")
        n_pos = int(math.floor(positive_fraction * batch_size + 0.5))
        n_neg = batch_size - n_pos
        left = np.empty(batch_size, dtype=np.int64)
        right = np.empty(batch_size, dtype=np.int64)

        anchors = rng.choice(self._pos_anchors, size=n_pos)
        for k, a in enumerate(anchors):
            group = self._members[self.labels[a]]
            if group.size == 1:
                partner = a
            else:
                # uniform over the group minus the anchor itself
                pos = int(np.searchsorted(group, a))
                r = int(rng.integers(group.size - 1))
                partner = group[r + 1] if r >= pos else group[r]
            left[k], right[k] = a, partner

        anchors = rng.integers(self.labels.size, size=n_neg)
        for k, a in enumerate(anchors, start=n_pos):
            others = self._others[self.labels[a]]
            left[k], right[k] = a, others[rng.integers(others.size)]

        order = rng.permutation(batch_size)
        left, right = left[order], right[order]
        same = (self.labels[left] == self.labels[right]).astype(np.float64)
        return left, right, same


def sample_pairs(features, labels, batch_size, positive_fraction, rng) -> PairBatch:
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] == 0:
        raise InputError("cannot sample pairs from an empty dataset")
    left, right, same = PairSampler(labels).sample(batch_size, positive_fraction, rng)
    return PairBatch(features[left], features[right], same)


@dataclass
class SiameseConfig:
    hidden: tuple = (128, 128)
    d_sim: int = 32
    margin: float = 1.0
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-3
    positive_fraction: float = 0.5
    losses: list = field(default_factory=list, repr=False)


def siamese_epoch(h, opt, features, sampler, cfg: SiameseConfig, gen, n_steps=None):
    """One pass of contrastive updates; returns the mean batch loss."""
    if n_steps is None:
        n_steps = max(1, math.ceil(features.shape[0] / cfg.batch_size))
    total = 0.0
    for _ in range(n_steps):
        li, ri, u = sampler.sample(cfg.batch_size, cfg.positive_fraction, gen)
        loss, grads = contrastive_loss_and_grads(
            h, PairBatch(features[li], features[ri], u), cfg.margin
        )
        optimizer_step(opt, h.net.params(), grads)
        total += loss
    return total / n_steps


def train_siamese(dataset, modality, config: SiameseConfig, rng: Rng):
    """Train a similarity net on the training split of ``dataset``.

    Returns ``(net, epoch_losses)``.
    """
    if config.epochs < 1:
        raise InputError("epochs must be at least 1")
    idx = dataset.train_idx
    features = (dataset.V if modality == IMAGE else dataset.T)[idx]
    labels = dataset.labels[idx]
    h = build_similarity_net(
        features.shape[1], modality, config.hidden, config.d_sim,
        rng.stream(f"init/siamese/{modality}"),
    )
    opt = OptimizerState("adam", config.learning_rate)
    sampler = PairSampler(labels)
    losses = []
    for epoch in range(config.epochs):
        gen = rng.stream(f"pretrain/{modality}/epoch{epoch}")
        loss = siamese_epoch(h, opt, features, sampler, config, gen)
        losses.append(loss)
        log.debug("siamese %s epoch %d loss %.6f", modality, epoch, loss)
    return h, losses
