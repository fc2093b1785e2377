"""Shared-space projection, transfer losses and the adversarial objectives.

Naming for a transfer triple ``(i, j, direction)``:

* ``intra``    distance between items i and j inside one modality
  (image for ``IMAGE_INTRA``, text for ``TEXT_INTRA``);
* ``paired``   common-space distance between item j and its own partner
  from the other modality (the anchor);
* ``unpaired`` common-space distance between item i and that same anchor.

For ``IMAGE_INTRA`` the anchor is t_j, so paired = s(v_j, t_j) and
unpaired = s(v_i, t_j). ``TEXT_INTRA`` swaps the modalities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError, ShapeError
from .nn_core import MLP, init_params
from .similarity_learning import pair_distances

TRANSFER_MODES = ("value", "difference", "product", "none")
SIMILARITY_SOURCES = ("siamese", "euclidean", "cosine")
IMAGE_INTRA = 0
TEXT_INTRA = 1
PROB_CLAMP = 1e-12


@dataclass
class GeneratorPair:
    g_v: MLP
    g_t: MLP

    def __post_init__(self):
        if self.g_v.output_dim != self.g_t.output_dim:
            raise ShapeError("both generators must map into the same common dimension")

    @property
    def d_s(self) -> int:
        return self.g_v.output_dim


@dataclass
class LabelClassifier:
    net: MLP

    @property
    def n_classes(self) -> int:
        return self.net.output_dim


@dataclass
class ModalityDiscriminator:
    """Three dense layers ending in one sigmoid unit: P(input is an image projection)."""

    net: MLP

    def __post_init__(self):
        if len(self.net.layers) != 3:
            raise ShapeError("the modality discriminator must have exactly 3 layers")
        last = self.net.layers[-1]
        if last.out_dim != 1 or last.activation != "sigmoid":
            raise ShapeError("the discriminator must end in a single sigmoid unit")


def build_generators(d_v, d_t, hidden=(256, 128), d_s=64, rng=None) -> GeneratorPair:
    g_v = MLP.build([d_v, *hidden, d_s])
    g_t = MLP.build([d_t, *hidden, d_s])
    if rng is not None:
        init_params(g_v, rng.stream("init/g_v"))
        init_params(g_t, rng.stream("init/g_t"))
    return GeneratorPair(g_v, g_t)


def build_classifier(d_s, n_classes, rng=None) -> LabelClassifier:
    net = MLP.build([d_s, n_classes])
    if rng is not None:
        init_params(net, rng.stream("init/classifier"))
    return LabelClassifier(net)


def build_discriminator(d_s, hidden=(64, 64), rng=None) -> ModalityDiscriminator:
    if len(hidden) != 2:
        raise ShapeError("discriminator takes exactly two hidden widths")
    net = MLP.build([d_s, *hidden, 1], hidden="relu", output="sigmoid")
    if rng is not None:
        init_params(net, rng.stream("init/discriminator"))
    return ModalityDiscriminator(net)


def project(gen: GeneratorPair, v_batch, t_batch):
    return gen.g_v.forward(v_batch), gen.g_t.forward(t_batch)


def cross_similarity(s_a, s_b, metric: str = "sqeuclidean"):
    """Distance between common-space vectors (row-wise for 2-D input)."""
    s_a = np.asarray(s_a, dtype=np.float64)
    s_b = np.asarray(s_b, dtype=np.float64)
    if s_a.shape != s_b.shape:
        raise ShapeError(f"shape mismatch {s_a.shape} vs {s_b.shape}")
    d = ((s_a - s_b) ** 2).sum(axis=-1)
    if metric == "euclidean":
        d = np.sqrt(d)
    elif metric != "sqeuclidean":
        raise ValueError(f"unknown metric {metric!r}")
    return float(d) if np.ndim(d) == 0 else d


@dataclass
class TransferTriples:
    i: np.ndarray
    j: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        self.i = np.asarray(self.i, dtype=np.int64).reshape(-1)
        self.j = np.asarray(self.j, dtype=np.int64).reshape(-1)
        self.direction = np.asarray(self.direction, dtype=np.int64).reshape(-1)
        if not (self.i.shape == self.j.shape == self.direction.shape):
            raise ShapeError("triple component lengths differ")
        if np.any(self.i == self.j):
            raise InputError("a transfer triple needs i != j")
        if not np.all((self.direction == IMAGE_INTRA) | (self.direction == TEXT_INTRA)):
            raise InputError("direction must be IMAGE_INTRA or TEXT_INTRA")

    def __len__(self):
        return self.i.size


def sample_transfer_triples(n: int, batch_size: int, rng) -> TransferTriples:
    """Uniform (i, j) with i != j over ``range(n)``, half of them per direction.

    With an odd batch the leftover triple gets a fair-coin direction.
    """
    if n < 2:
        raise InputError("need at least two items to form a transfer triple")
    i = rng.integers(n, size=batch_size)
    j = rng.integers(n - 1, size=batch_size)
    j = j + (j >= i)
    direction = np.zeros(batch_size, dtype=np.int64)
    direction[batch_size // 2:] = TEXT_INTRA
    if batch_size % 2:
        direction[-1] = rng.integers(2)
    direction = rng.permutation(direction)
    return TransferTriples(i, j, direction)


def cross_terms(s_v, s_t, triples: TransferTriples, metric="sqeuclidean"):
    """Common-space ``paired`` and ``unpaired`` distances plus their backward map.

    ``backward(d_paired, d_unpaired)`` returns ``(ds_v, ds_t)``.
    """
    img = triples.direction == IMAGE_INTRA
    # side holding items i and j ("A") and the anchor side ("B")
    A = np.where(img[:, None], s_v[triples.j], s_t[triples.j])
    A_i = np.where(img[:, None], s_v[triples.i], s_t[triples.i])
    B = np.where(img[:, None], s_t[triples.j], s_v[triples.j])
    diff_p = A - B
    diff_u = A_i - B
    sq_p = np.einsum("ij,ij->i", diff_p, diff_p)
    sq_u = np.einsum("ij,ij->i", diff_u, diff_u)
    if metric == "sqeuclidean":
        paired, unpaired = sq_p, sq_u
        scale_p, scale_u = 2.0 * np.ones_like(sq_p), 2.0 * np.ones_like(sq_u)
    elif metric == "euclidean":
        paired, unpaired = np.sqrt(sq_p), np.sqrt(sq_u)
        with np.errstate(divide="ignore"):
            scale_p = np.where(paired > 0, 1.0 / paired, 0.0)
            scale_u = np.where(unpaired > 0, 1.0 / unpaired, 0.0)
    else:
        raise ValueError(f"unknown metric {metric!r}")

    def backward(d_paired, d_unpaired):
        gA = (scale_p * d_paired)[:, None] * diff_p
        gAi = (scale_u * d_unpaired)[:, None] * diff_u
        gB = -gA - gAi
        ds_v = np.zeros_like(s_v)
        ds_t = np.zeros_like(s_t)
        tx = ~img
        np.add.at(ds_v, triples.j[img], gA[img])
        np.add.at(ds_v, triples.i[img], gAi[img])
        np.add.at(ds_t, triples.j[img], gB[img])
        np.add.at(ds_t, triples.j[tx], gA[tx])
        np.add.at(ds_t, triples.i[tx], gAi[tx])
        np.add.at(ds_v, triples.j[tx], gB[tx])
        return ds_v, ds_t

    return paired, unpaired, backward


def transfer_residuals(mode, intra, paired, unpaired, c_self=1.0, clamp=None):
    """The quantities inside the absolute values; their signs pick the loss piece."""
    if mode == "value":
        return [c_self - paired, intra - unpaired]
    if mode == "difference":
        return [(paired - unpaired) - (c_self - intra)]
    if mode == "product":
        prod = intra * paired
        if clamp is not None:
            prod = np.clip(prod, -clamp, clamp)
        return [unpaired - prod]
    if mode == "none":
        return []
    raise ValueError(f"unknown transfer mode {mode!r}")


def transfer_terms(mode, intra, paired, unpaired, c_self=1.0, clamp=None):
    """Mean transfer loss and its gradient w.r.t. (intra, paired, unpaired)."""
    intra = np.asarray(intra, dtype=np.float64)
    paired = np.asarray(paired, dtype=np.float64)
    unpaired = np.asarray(unpaired, dtype=np.float64)
    if not (intra.shape == paired.shape == unpaired.shape):
        raise ShapeError("intra, paired and unpaired must have equal length")
    m = intra.size
    zeros = np.zeros(m)
    if mode == "none" or m == 0:
        return 0.0, (zeros, zeros.copy(), zeros.copy())
    res = transfer_residuals(mode, intra, paired, unpaired, c_self, clamp)
    loss = float(sum(np.abs(r).sum() for r in res) / m)
    sg = [np.sign(r) / m for r in res]
    if mode == "value":
        d_paired = -sg[0]
        d_intra = sg[1]
        d_unpaired = -sg[1]
    elif mode == "difference":
        d_paired = sg[0]
        d_unpaired = -sg[0]
        d_intra = sg[0]
    else:
        d_unpaired = sg[0]
        d_prod = -sg[0]
        if clamp is not None:
            d_prod = d_prod * (np.abs(intra * paired) < clamp)
        d_intra = d_prod * paired
        d_paired = d_prod * intra
    return loss, (d_intra, d_paired, d_unpaired)


def transfer_loss_value(intra, paired, unpaired, c_self=1.0) -> float:
    return transfer_terms("value", intra, paired, unpaired, c_self)[0]


def transfer_loss_difference(intra, paired, unpaired, c_self=1.0) -> float:
    return transfer_terms("difference", intra, paired, unpaired, c_self)[0]


def transfer_loss_product(intra, paired, unpaired, clamp=None) -> float:
    return transfer_terms("product", intra, paired, unpaired, clamp=clamp)[0]


def intra_similarities(source, features_v, features_t, triples: TransferTriples,
                       h_v=None, h_t=None):
    """Intra-modal distances for each triple.

    Returns ``(intra, backward)``; ``backward(d_intra)`` yields ``(grads_h_v,
    grads_h_t)`` for the siamese source and ``(None, None)`` otherwise.
    Triples with IMAGE_INTRA read image features, TEXT_INTRA read text.
    """
    img = triples.direction == IMAGE_INTRA
    txt = ~img
    intra = np.zeros(len(triples))
    if source == "siamese":
        back_v = back_t = None
        if img.any():
            s, back_v = pair_distances(
                h_v, features_v[triples.i[img]], features_v[triples.j[img]])
            intra[img] = s
        if txt.any():
            s, back_t = pair_distances(
                h_t, features_t[triples.i[txt]], features_t[triples.j[txt]])
            intra[txt] = s

        def backward(d_intra):
            gv = back_v(d_intra[img]) if back_v else [np.zeros_like(p) for p in h_v.net.params()]
            gt = back_t(d_intra[txt]) if back_t else [np.zeros_like(p) for p in h_t.net.params()]
            return gv, gt

        return intra, backward

    for mask, feats in ((img, features_v), (txt, features_t)):
        if not mask.any():
            continue
        a = feats[triples.i[mask]]
        b = feats[triples.j[mask]]
        if source == "euclidean":
            intra[mask] = ((a - b) ** 2).sum(axis=1)
        elif source == "cosine":
            na = np.linalg.norm(a, axis=1)
            nb = np.linalg.norm(b, axis=1)
            denom = np.maximum(na * nb, 1e-12)
            intra[mask] = 1.0 - (a * b).sum(axis=1) / denom
        else:
            raise ValueError(f"unknown similarity source {source!r}")
    return intra, lambda d_intra: (None, None)


def softmax_xent(logits, onehot):
    """Mean softmax cross-entropy and d(loss)/d(logits), log-sum-exp stabilised."""
    logits = np.asarray(logits, dtype=np.float64)
    onehot = np.asarray(onehot, dtype=np.float64)
    if logits.shape != onehot.shape:
        raise ShapeError(f"logits {logits.shape} vs labels {onehot.shape}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    n = logits.shape[0]
    loss = float(-(onehot * logp).sum() / n)
    return loss, (np.exp(logp) - onehot) / n


def label_loss(clf: LabelClassifier, s_batch, labels) -> float:
    """Cross-entropy of the classifier on common-space vectors.

    Stack both modalities' projections (and their labels twice) to score both.
    """
    return softmax_xent(clf.net.forward(s_batch), labels)[0]


def label_terms(clf: LabelClassifier, s_v, s_t, onehot):
    """L_lab over both modalities; backward gives (clf grads, ds_v, ds_t)."""
    b = s_v.shape[0]
    logits = clf.net.forward(np.vstack([s_v, s_t]))
    loss, dlogits = softmax_xent(logits, np.vstack([onehot, onehot]))

    def backward(weight=1.0):
        grads, ds = clf.net.backward(weight * dlogits)
        return grads, ds[:b], ds[b:]

    return loss, backward


def adversarial_terms(disc: ModalityDiscriminator, s_v, s_t):
    """(L_V, L_T) with image labelled 1 and text 0, plus a weighted backward map.

    ``backward(w_v, w_t)`` differentiates ``w_v*L_V + w_t*L_T`` and returns
    ``(disc grads, ds_v, ds_t)``.
    """
    b_v = s_v.shape[0]
    p = disc.net.forward(np.vstack([s_v, s_t]))[:, 0]
    pv = np.clip(p[:b_v], PROB_CLAMP, 1.0 - PROB_CLAMP)
    pt = np.clip(p[b_v:], PROB_CLAMP, 1.0 - PROB_CLAMP)
    l_v = float(-np.log(pv).mean())
    l_t = float(-np.log(1.0 - pt).mean())
    live_v = (p[:b_v] > PROB_CLAMP) & (p[:b_v] < 1.0 - PROB_CLAMP)
    live_t = (p[b_v:] > PROB_CLAMP) & (p[b_v:] < 1.0 - PROB_CLAMP)
    dv = np.where(live_v, -1.0 / pv, 0.0) / b_v
    dt = np.where(live_t, 1.0 / (1.0 - pt), 0.0) / pt.size

    def backward(w_v, w_t):
        up = np.concatenate([w_v * dv, w_t * dt])[:, None]
        grads, ds = disc.net.backward(up)
        return grads, ds[:b_v], ds[b_v:]

    return (l_v, l_t), backward


def adversarial_losses(disc: ModalityDiscriminator, s_v, s_t):
    return adversarial_terms(disc, s_v, s_t)[0]


@dataclass
class LossWeights:
    lab: float = 1.0
    sim: float = 1.0
    adv: float = 1.0


@dataclass
class LossParts:
    lab: float
    sim: float
    v: float
    t: float


def adversarial_coefficients(role: str, symmetric: bool = False):
    """Coefficients on (L_V, L_T) in the generator or discriminator objective.

    The default follows the published objectives: generator +L_V - L_T,
    discriminator -L_V + L_T. ``symmetric=True`` switches to a conventional
    minimax game (discriminator minimises L_V + L_T, generator maximises it);
    that variant is not part of the published method.
    """
    if role == "generator":
        return (-1.0, -1.0) if symmetric else (1.0, -1.0)
    if role == "discriminator":
        return (1.0, 1.0) if symmetric else (-1.0, 1.0)
    raise ValueError(role)


def generator_objective(parts: LossParts, weights: LossWeights | None = None,
                        symmetric: bool = False) -> float:
    w = weights or LossWeights()
    cv, ct = adversarial_coefficients("generator", symmetric)
    return w.lab * parts.lab + w.sim * parts.sim + w.adv * (cv * parts.v + ct * parts.t)


def discriminator_objective(parts: LossParts, symmetric: bool = False) -> float:
    cv, ct = adversarial_coefficients("discriminator", symmetric)
    return cv * parts.v + ct * parts.t
