"""Finite-difference verification of every hand-written gradient path.

Each case builds a small random configuration (dims <= 8, batch <= 4),
computes analytic parameter gradients through the same primitives the
training loop uses, and compares them against central differences. Parameters
whose +/-eps perturbation crosses a ReLU, hinge, abs or clamp kink are skipped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .common_space import (
    adversarial_terms,
    build_discriminator,
    cross_terms,
    intra_similarities,
    label_terms,
    sample_transfer_triples,
    transfer_residuals,
    transfer_terms,
    LabelClassifier,
    PROB_CLAMP,
)
from .nn_core import MLP, Rng, finite_diff_grad_masked, init_params
from .similarity_learning import (
    PairBatch,
    SimilarityNet,
    contrastive_loss_and_grads,
    contrastive_terms,
    pair_distances,
)

LOSSES = ("contrastive", "value", "difference", "product", "label", "adv_image", "adv_text")
# below this magnitude central differences are dominated by roundoff (~1e-10)
REL_FLOOR = 1e-4


@dataclass
class GradCheckResult:
    loss: str
    configs: int
    checked: int
    skipped: int
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_err <= self.tolerance

    def to_dict(self) -> dict:
        return {"loss": self.loss, "configs": self.configs, "checked": self.checked,
                "skipped": self.skipped, "max_rel_err": self.max_rel_err,
                "tolerance": self.tolerance, "passed": self.passed}


def rel_error(analytic, numeric, floor=REL_FLOOR):
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def _net(gen, sizes, output="identity"):
    return init_params(MLP.build(sizes, hidden="relu", output=output), gen)


def _pattern(*nets):
    return b"#".join(n.activation_pattern() for n in nets)


def _contrastive_case(gen):
    d, hid, emb, b = (int(x) for x in gen.integers(2, [9, 9, 9, 5]))
    h = SimilarityNet(_net(gen, [d, hid, emb]), "image")
    left, right = gen.normal(size=(b, d)), gen.normal(size=(b, d))
    u = np.zeros(b)
    u[: b // 2] = 1.0
    s, _ = pair_distances(h, left, right)
    # put the margin among the negative distances so both hinge states occur
    margin = float(np.median(s)) + 1e-3
    batch = PairBatch(left, right, u)

    def analytic():
        return contrastive_loss_and_grads(h, batch, margin)[1]

    def probe():
        s, _ = pair_distances(h, left, right)
        sig = _pattern(h.net) + (margin - s > 0).tobytes()
        return contrastive_terms(s, u, margin)[0], sig

    return [h.net], analytic, probe


def _transfer_case(mode):
    def build(gen):
        d_v, d_t, hid, d_s, d_sim = (int(x) for x in gen.integers(2, 9, size=5))
        b = int(gen.integers(2, 5))
        g_v, g_t = _net(gen, [d_v, hid, d_s]), _net(gen, [d_t, hid, d_s])
        h_v = SimilarityNet(_net(gen, [d_v, hid, d_sim]), "image")
        h_t = SimilarityNet(_net(gen, [d_t, hid, d_sim]), "text")
        V, T = gen.normal(size=(b, d_v)), gen.normal(size=(b, d_t))
        triples = sample_transfer_triples(b, 4, gen)
        c_self = float(gen.uniform(0.5, 2.0))
        clamp = 50.0 if mode == "product" else None

        def analytic():
            s_v, s_t = g_v.forward(V), g_t.forward(T)
            intra, back_intra = intra_similarities("siamese", V, T, triples, h_v, h_t)
            paired, unpaired, back_cross = cross_terms(s_v, s_t, triples)
            _, (d_i, d_p, d_u) = transfer_terms(mode, intra, paired, unpaired, c_self, clamp)
            grads_hv, grads_ht = back_intra(d_i)
            ds_v, ds_t = back_cross(d_p, d_u)
            gv, _ = g_v.backward(ds_v)
            gt, _ = g_t.backward(ds_t)
            return gv + gt + grads_hv + grads_ht

        def probe():
            s_v, s_t = g_v.forward(V), g_t.forward(T)
            sig = _pattern(g_v, g_t)
            intra = np.zeros(len(triples))
            for mask, h, X in ((triples.direction == 0, h_v, V), (triples.direction == 1, h_t, T)):
                if mask.any():
                    intra[mask], _ = pair_distances(h, X[triples.i[mask]], X[triples.j[mask]])
                    sig += _pattern(h.net)
            paired, unpaired, _ = cross_terms(s_v, s_t, triples)
            res = transfer_residuals(mode, intra, paired, unpaired, c_self, clamp)
            sig += b"".join(np.sign(r).astype(np.int8).tobytes() for r in res)
            if clamp is not None:
                sig += (np.abs(intra * paired) < clamp).tobytes()
            return transfer_terms(mode, intra, paired, unpaired, c_self, clamp)[0], sig

        return [g_v, g_t, h_v.net, h_t.net], analytic, probe

    return build


def _label_case(gen):
    d_v, d_t, hid, d_s = (int(x) for x in gen.integers(2, 9, size=4))
    b, c = int(gen.integers(2, 5)), int(gen.integers(2, 5))
    g_v, g_t = _net(gen, [d_v, hid, d_s]), _net(gen, [d_t, hid, d_s])
    clf = LabelClassifier(_net(gen, [d_s, c]))
    V, T = gen.normal(size=(b, d_v)), gen.normal(size=(b, d_t))
    Y = np.eye(c)[gen.integers(c, size=b)]

    def analytic():
        s_v, s_t = g_v.forward(V), g_t.forward(T)
        _, back = label_terms(clf, s_v, s_t, Y)
        cg, ds_v, ds_t = back(1.0)
        return g_v.backward(ds_v)[0] + g_t.backward(ds_t)[0] + cg

    def probe():
        s_v, s_t = g_v.forward(V), g_t.forward(T)
        loss, _ = label_terms(clf, s_v, s_t, Y)
        return loss, _pattern(g_v, g_t)

    return [g_v, g_t, clf.net], analytic, probe


def _adv_case(which):
    w = (1.0, 0.0) if which == "image" else (0.0, 1.0)

    def build(gen):
        d_v, d_t, hid, d_s, dh = (int(x) for x in gen.integers(2, 9, size=5))
        b = int(gen.integers(2, 5))
        g_v, g_t = _net(gen, [d_v, hid, d_s]), _net(gen, [d_t, hid, d_s])
        disc = build_discriminator(d_s, (dh, dh))
        init_params(disc.net, gen)
        V, T = gen.normal(size=(b, d_v)), gen.normal(size=(b, d_t))

        def analytic():
            s_v, s_t = g_v.forward(V), g_t.forward(T)
            _, back = adversarial_terms(disc, s_v, s_t)
            dg, ds_v, ds_t = back(*w)
            return g_v.backward(ds_v)[0] + g_t.backward(ds_t)[0] + dg

        def probe():
            s_v, s_t = g_v.forward(V), g_t.forward(T)
            (l_v, l_t), _ = adversarial_terms(disc, s_v, s_t)
            p = disc.net.layers[-1]._a[:, 0]
            live = (p > PROB_CLAMP) & (p < 1 - PROB_CLAMP)
            sig = _pattern(g_v, g_t, disc.net) + live.tobytes()
            return w[0] * l_v + w[1] * l_t, sig

        return [g_v, g_t, disc.net], analytic, probe

    return build


CASES = {
    "contrastive": _contrastive_case,
    "value": _transfer_case("value"),
    "difference": _transfer_case("difference"),
    "product": _transfer_case("product"),
    "label": _label_case,
    "adv_image": _adv_case("image"),
    "adv_text": _adv_case("text"),
}


def check_loss(name, seed=0, n_configs=20, eps=1e-5, tol=1e-4, corrupt=False) -> GradCheckResult:
    """Run ``n_configs`` random configurations of one loss through the checker.

    ``corrupt`` scales the analytic gradient by 1.01 (negative-control hook).
    """
    rng = Rng(seed)
    checked = skipped = 0
    worst = 0.0
    for k in range(n_configs):
        gen = rng.stream(f"gradcheck/{name}/{k}")
        nets, analytic, probe = CASES[name](gen)
        grads = analytic()
        if corrupt:
            grads = [g * 1.01 for g in grads]
        numeric, valid = finite_diff_grad_masked(probe, nets, eps)
        for a, n, ok in zip(grads, numeric, valid):
            checked += int(ok.sum())
            skipped += int((~ok).sum())
            if ok.any():
                worst = max(worst, float(rel_error(a[ok], n[ok]).max()))
    return GradCheckResult(name, n_configs, checked, skipped, worst, tol)


def run_gradcheck(seed=0, n_configs=20, eps=1e-5, tol=1e-4, corrupt=None):
    return [check_loss(name, seed, n_configs, eps, tol, corrupt == name) for name in LOSSES]
