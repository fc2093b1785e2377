"""Training loop: siamese pretraining, alternating D/G updates, checkpoints.

Three strategies control the siamese nets:

* ``two-stage``   pretrain, then freeze them for the cross-modal phase;
* ``fine-tune``   pretrain, then keep updating them at ``finetune_lr``;
* ``end-to-end``  no pretraining, everything trained jointly from scratch.

Each training batch runs one discriminator update and then one
generator+classifier update against the freshly updated discriminator.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .common_space import (
    SIMILARITY_SOURCES,
    TRANSFER_MODES,
    LossWeights,
    adversarial_coefficients,
    adversarial_terms,
    build_classifier,
    build_discriminator,
    build_generators,
    cross_terms,
    intra_similarities,
    label_terms,
    sample_transfer_triples,
    transfer_terms,
)
from .datagen import MultimodalDataset, SyntheticConfig, generate_synthetic, load_dataset
from .errors import CheckpointError, ConfigError, DivergenceError
from .nn_core import OptimizerState, Rng, optimizer_step, param_digest
from .retrieval_eval import RetrievalReport, evaluate
from .similarity_learning import (
    IMAGE,
    TEXT,
    PairBatch,
    PairSampler,
    SiameseConfig,
    build_similarity_net,
    contrastive_loss_and_grads,
    contrastive_terms,
    pair_distances,
    siamese_epoch,
)

log = logging.getLogger(__name__)

STRATEGIES = ("two-stage", "fine-tune", "end-to-end")
CKPT_MAGIC = b"CMSTCKPT"
CKPT_VERSION = 1
NET_ORDER = ("h_v", "h_t", "g_v", "g_t", "classifier", "discriminator")
OPT_ORDER = ("siamese_v", "siamese_t", "generator", "discriminator")


# --------------------------------------------------------------------------- config


@dataclass
class StrategyConfig:
    variant: str = "two-stage"
    siamese_pretrain_epochs: int = 50
    finetune_lr: float = 1e-4


@dataclass
class ModelConfig:
    siamese_hidden: list = field(default_factory=lambda: [128, 128])
    d_sim: int = 32
    margin: float = 1.0
    positive_fraction: float = 0.5
    generator_hidden: list = field(default_factory=lambda: [256, 128])
    d_s: int = 64
    discriminator_hidden: list = field(default_factory=lambda: [64, 64])
    c_self: float = 0.0
    cross_metric: str = "sqeuclidean"
    product_clamp: float | None = 1e3


@dataclass
class OptimConfig:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class EvalConfig:
    ks: list = field(default_factory=lambda: [1, 5, 10, 50])
    truncation: int | None = 50
    every: int = 10


@dataclass
class ExperimentConfig:
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    data_path: str | None = None
    transfer: str = "difference"
    similarity_source: str = "siamese"
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    epochs: int = 100
    batch_size: int = 64
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    adversarial: str = "zero-sum"
    divergence_threshold: float = 1e6
    log_steps: bool = False
    seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict | None = None) -> "ExperimentConfig":
        cfg = cls()
        _merge(cfg, data or {}, "")
        return cfg.validate()

    def validate(self) -> "ExperimentConfig":
        self.data.validate()
        checks = [
            ("transfer", self.transfer in TRANSFER_MODES, f"one of {TRANSFER_MODES}"),
            ("similarity_source", self.similarity_source in SIMILARITY_SOURCES,
             f"one of {SIMILARITY_SOURCES}"),
            ("strategy.variant", self.strategy.variant in STRATEGIES, f"one of {STRATEGIES}"),
            ("strategy.siamese_pretrain_epochs", self.strategy.siamese_pretrain_epochs >= 0,
             ">= 0"),
            ("strategy.finetune_lr", self.strategy.finetune_lr >= 0, ">= 0"),
            ("epochs", self.epochs >= 1, ">= 1"),
            ("batch_size", self.batch_size >= 2, ">= 2"),
            ("optimizer.kind", self.optimizer.kind in ("adam", "sgd"), "'adam' or 'sgd'"),
            ("optimizer.lr", self.optimizer.lr >= 0, ">= 0"),
            ("model.margin", self.model.margin > 0, "> 0"),
            ("model.positive_fraction", 0 < self.model.positive_fraction < 1, "in (0, 1)"),
            ("model.d_s", self.model.d_s >= 1, ">= 1"),
            ("model.d_sim", self.model.d_sim >= 1, ">= 1"),
            ("model.cross_metric", self.model.cross_metric in ("sqeuclidean", "euclidean"),
             "'sqeuclidean' or 'euclidean'"),
            ("model.discriminator_hidden", len(self.model.discriminator_hidden) == 2,
             "exactly two widths (3 layers)"),
            ("model.c_self", math.isfinite(self.model.c_self), "finite"),
            ("adversarial", self.adversarial in ("zero-sum", "symmetric"),
             "'zero-sum' or 'symmetric'"),
            ("eval.every", self.eval.every >= 0, ">= 0"),
            ("eval.ks", all(int(k) >= 1 for k in self.eval.ks), "positive integers"),
            ("divergence_threshold", self.divergence_threshold > 0, "> 0"),
        ]
        for name, ok, want in checks:
            if not ok:
                raise ConfigError(f"config field {name} must be {want}", name)
        if self.eval.truncation is not None and self.eval.truncation < 1:
            raise ConfigError("eval.truncation must be >= 1 or null", "eval.truncation")
        return self

    def hash_bytes(self) -> bytes:
        """SHA-256 of the canonical config, ignoring where the data lives on disk."""
        d = self.to_dict()
        d.pop("data_path")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode("utf-8")).digest()

    def siamese_config(self) -> SiameseConfig:
        return SiameseConfig(
            hidden=tuple(self.model.siamese_hidden),
            d_sim=self.model.d_sim,
            margin=self.model.margin,
            epochs=max(1, self.strategy.siamese_pretrain_epochs),
            batch_size=self.batch_size,
            learning_rate=self.optimizer.lr,
            positive_fraction=self.model.positive_fraction,
        )


def _merge(obj, data: dict, prefix: str) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"config section {prefix or '<root>'} must be an object", prefix)
    names = {f.name for f in dataclasses.fields(obj)}
    for key, value in data.items():
        path = f"{prefix}{key}"
        if key not in names:
            raise ConfigError(f"unknown config field {path}", path)
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            _merge(current, value, path + ".")
            continue
        if isinstance(current, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"config field {path} must be true/false", path)
        elif isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        elif isinstance(current, (int, float)) and not isinstance(current, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                if not (value is None and key in ("product_clamp", "truncation")):
                    raise ConfigError(f"config field {path} must be a number", path)
            elif isinstance(current, int) and int(value) != value:
                raise ConfigError(f"config field {path} must be an integer", path)
            elif isinstance(current, int):
                value = int(value)
        elif isinstance(current, list) and not isinstance(value, list):
            raise ConfigError(f"config field {path} must be a list", path)
        setattr(obj, key, value)
    if isinstance(obj, SyntheticConfig):
        try:
            SyntheticConfig.from_dict(dataclasses.asdict(obj))
        except ConfigError as exc:
            raise ConfigError(str(exc), f"{prefix}{exc.field}") from exc


# --------------------------------------------------------------------------- models


@dataclass
class Models:
    h_v: object
    h_t: object
    gen: object
    clf: object
    disc: object

    def nets(self) -> dict:
        return {
            "h_v": self.h_v.net, "h_t": self.h_t.net,
            "g_v": self.gen.g_v, "g_t": self.gen.g_t,
            "classifier": self.clf.net, "discriminator": self.disc.net,
        }

    def siamese_digest(self) -> str:
        return param_digest([self.h_v.net, self.h_t.net])


def build_models(cfg: ExperimentConfig, d_v: int, d_t: int, n_classes: int, rng: Rng) -> Models:
    m = cfg.model
    h_v = build_similarity_net(d_v, IMAGE, tuple(m.siamese_hidden), m.d_sim,
                               rng.stream("init/siamese/image"))
    h_t = build_similarity_net(d_t, TEXT, tuple(m.siamese_hidden), m.d_sim,
                               rng.stream("init/siamese/text"))
    gen = build_generators(d_v, d_t, tuple(m.generator_hidden), m.d_s, rng)
    clf = build_classifier(m.d_s, n_classes, rng)
    disc = build_discriminator(m.d_s, tuple(m.discriminator_hidden), rng)
    return Models(h_v, h_t, gen, clf, disc)


# --------------------------------------------------------------------------- metrics


RECORD_KEYS = ("epoch", "phase", "phase_epoch", "L_sia", "L_lab", "L_sim", "L_V", "L_T",
               "L_G", "L_D", "siamese_lr", "siamese_digest", "eval")
STEP_KEYS = ("L_sia", "L_lab", "L_sim", "L_V", "L_T", "L_G", "L_D", "L_V_gen", "L_T_gen")


@dataclass
class MetricsLog:
    records: list = field(default_factory=list)
    steps: list = field(default_factory=list)

    def append(self, record: dict) -> None:
        if self.records and record["epoch"] != self.records[-1]["epoch"] + 1:
            raise ValueError("metric records must have consecutive epoch indices")
        self.records.append({k: record.get(k) for k in RECORD_KEYS})

    def phase(self, name: str) -> list:
        return [r for r in self.records if r["phase"] == name]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.records)

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @classmethod
    def read(cls, path) -> "MetricsLog":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([json.loads(line) for line in lines if line.strip()])


# --------------------------------------------------------------------------- trainer


class Trainer:
    """Owns every mutable piece of a run: models, optimizers, counters, logs."""

    def __init__(self, cfg: ExperimentConfig, dataset: MultimodalDataset, models: Models | None = None):
        self.cfg = cfg
        self.data = dataset
        self.rng = Rng(cfg.seed)
        self.models = models or build_models(
            cfg, dataset.d_v, dataset.d_t, dataset.n_classes, self.rng)
        o = cfg.optimizer

        def opt(lr=o.lr):
            return OptimizerState(o.kind, lr, o.beta1, o.beta2, o.eps)

        self.opts = {name: opt() for name in OPT_ORDER}
        self.pretrain_done = 0
        self.epoch_done = 0
        self.log = MetricsLog()
        train = dataset.train_idx
        labels = dataset.labels
        self._train_labels = labels[train]
        self._sampler = PairSampler(self._train_labels)
        self._V_train = dataset.V[train]
        self._T_train = dataset.T[train]
        self._Y = dataset.Y
        self._sia_cfg = cfg.siamese_config()

    # -- strategy helpers

    @property
    def uses_siamese(self) -> bool:
        # the no-transfer arm never reads intra-modal distances
        return self.cfg.similarity_source == "siamese" and self.cfg.transfer != "none"

    @property
    def pretrain_epochs(self) -> int:
        if not self.uses_siamese or self.cfg.strategy.variant == "end-to-end":
            return 0
        return self.cfg.strategy.siamese_pretrain_epochs

    @property
    def main_siamese_lr(self) -> float:
        if not self.uses_siamese:
            return 0.0
        variant = self.cfg.strategy.variant
        if variant == "two-stage":
            return 0.0
        if variant == "fine-tune":
            return self.cfg.strategy.finetune_lr
        return self.cfg.optimizer.lr

    @property
    def siamese_trainable(self) -> bool:
        return self.uses_siamese and self.cfg.strategy.variant != "two-stage"

    def _check(self, values: dict) -> None:
        limit = self.cfg.divergence_threshold
        for name, v in values.items():
            if v is None:
                continue
            if not math.isfinite(v) or abs(v) > limit:
                raise DivergenceError(
                    f"{name}={v!r} at epoch {self.epoch_done + self.pretrain_done} "
                    f"exceeds the divergence guard ({limit:g})",
                    self.log.records,
                )

    # -- phases

    def pretrain_epoch(self) -> dict:
        e = self.pretrain_done
        losses = []
        for h, feats, opt_name in (
            (self.models.h_v, self._V_train, "siamese_v"),
            (self.models.h_t, self._T_train, "siamese_t"),
        ):
            gen = self.rng.stream(f"pretrain/{h.modality}/epoch{e}")
            losses.append(siamese_epoch(h, self.opts[opt_name], feats, self._sampler,
                                        self._sia_cfg, gen))
        l_sia = float(np.mean(losses))
        self._check({"L_sia": l_sia})
        rec = {
            "epoch": len(self.log.records), "phase": "pretrain", "phase_epoch": e,
            "L_sia": l_sia, "siamese_lr": self.opts["siamese_v"].learning_rate,
            "siamese_digest": self.models.siamese_digest(),
        }
        self.log.append(rec)
        self.pretrain_done += 1
        return rec

    def train_step(self, batch_idx: np.ndarray, gen: np.random.Generator) -> dict:
        """One discriminator update followed by one generator+classifier update."""
        cfg, m = self.cfg, self.models
        sym = cfg.adversarial == "symmetric"
        w = cfg.weights
        V = self.data.V[batch_idx]
        T = self.data.T[batch_idx]
        Y = self._Y[batch_idx]
        b = len(batch_idx)

        s_v = m.gen.g_v.forward(V)
        s_t = m.gen.g_t.forward(T)

        # discriminator
        (l_v, l_t), back = adversarial_terms(m.disc, s_v, s_t)
        dv, dt = adversarial_coefficients("discriminator", sym)
        l_d = dv * l_v + dt * l_t
        d_grads, _, _ = back(dv, dt)
        optimizer_step(self.opts["discriminator"], m.disc.net.params(), d_grads)

        # generator + classifier, against the updated discriminator
        triples = sample_transfer_triples(b, b, gen)
        if cfg.transfer != "none":
            intra, back_intra = intra_similarities(
                cfg.similarity_source, V, T, triples, m.h_v, m.h_t)
            paired, unpaired, back_cross = cross_terms(s_v, s_t, triples, cfg.model.cross_metric)
            l_sim, (d_intra, d_p, d_u) = transfer_terms(
                cfg.transfer, intra, paired, unpaired, cfg.model.c_self,
                cfg.model.product_clamp)
        else:
            l_sim = 0.0
        l_lab, back_lab = label_terms(m.clf, s_v, s_t, Y)
        (g_lv, g_lt), back_adv = adversarial_terms(m.disc, s_v, s_t)
        gv, gt = adversarial_coefficients("generator", sym)
        l_g = w.lab * l_lab + w.sim * l_sim + w.adv * (gv * g_lv + gt * g_lt)

        clf_grads, dsv, dst = back_lab(w.lab)
        _, dsv2, dst2 = back_adv(w.adv * gv, w.adv * gt)
        dsv = dsv + dsv2
        dst = dst + dst2
        sia_grads = None
        if cfg.transfer != "none":
            dsv3, dst3 = back_cross(w.sim * d_p, w.sim * d_u)
            dsv = dsv + dsv3
            dst = dst + dst3
            if self.siamese_trainable:
                sia_grads = back_intra(w.sim * d_intra)
        gv_grads, _ = m.gen.g_v.backward(dsv)
        gt_grads, _ = m.gen.g_t.backward(dst)
        params = m.gen.g_v.params() + m.gen.g_t.params() + m.clf.net.params()
        optimizer_step(self.opts["generator"], params, gv_grads + gt_grads + clf_grads)

        # siamese nets: contrastive loss always observed, applied per strategy
        l_sia = None
        if self.uses_siamese:
            sia = []
            for k, (h, feats, opt_name) in enumerate((
                (m.h_v, self._V_train, "siamese_v"),
                (m.h_t, self._T_train, "siamese_t"),
            )):
                li, ri, u = self._sampler.sample(b, cfg.model.positive_fraction, gen)
                batch = PairBatch(feats[li], feats[ri], u)
                if self.siamese_trainable:
                    loss, grads = contrastive_loss_and_grads(h, batch, cfg.model.margin)
                    if sia_grads is not None:
                        grads = [g + x for g, x in zip(grads, sia_grads[k])]
                    optimizer_step(self.opts[opt_name], h.net.params(), grads)
                else:
                    s, _ = pair_distances(h, batch.left, batch.right)
                    loss = contrastive_terms(s, u, cfg.model.margin)[0]
                sia.append(loss)
            l_sia = float(np.mean(sia))

        rec = {"L_sia": l_sia, "L_lab": l_lab, "L_sim": l_sim, "L_V": l_v, "L_T": l_t,
               "L_G": l_g, "L_D": l_d, "L_V_gen": g_lv, "L_T_gen": g_lt}
        self._check(rec)
        return rec

    def main_epoch(self) -> dict:
        e = self.epoch_done
        if e == 0:
            for name in ("siamese_v", "siamese_t"):
                self.opts[name].learning_rate = self.main_siamese_lr
        gen = self.rng.stream(f"train/epoch{e}")
        order = gen.permutation(self.data.train_idx)
        bs = self.cfg.batch_size
        batches = [order[k:k + bs] for k in range(0, order.size, bs)]
        if len(batches) > 1 and batches[-1].size < 2:
            batches[-2] = np.concatenate([batches[-2], batches.pop()])
        steps = []
        for batch in batches:
            rec = self.train_step(batch, gen)
            steps.append(rec)
            if self.cfg.log_steps:
                self.log.steps.append({"epoch": e, **rec})
        mean = {}
        for k in STEP_KEYS:
            vals = [s[k] for s in steps]
            mean[k] = None if vals[0] is None else float(np.mean(vals))
        self.epoch_done += 1
        snapshot = None
        every = self.cfg.eval.every
        if every and (self.epoch_done % every == 0 or self.epoch_done == self.cfg.epochs):
            rep = self.evaluate()
            snapshot = {"map_avg": rep.map_avg, "top1_avg": rep.topk[min(rep.topk)][2]}
        rec = {
            "epoch": len(self.log.records), "phase": "main", "phase_epoch": e,
            "L_sia": mean["L_sia"], "L_lab": mean["L_lab"], "L_sim": mean["L_sim"],
            "L_V": mean["L_V"], "L_T": mean["L_T"], "L_G": mean["L_G"], "L_D": mean["L_D"],
            "siamese_lr": self.main_siamese_lr,
            "siamese_digest": self.models.siamese_digest(),
            "eval": snapshot,
        }
        self.log.append(rec)
        return rec

    def evaluate(self, ks=None, truncation="config") -> RetrievalReport:
        cfg = self.cfg
        n_test = self.data.test_idx.size
        if ks is None:
            # configured ks beyond the test-set size are dropped; explicit ones are checked
            ks = [int(k) for k in cfg.eval.ks if int(k) <= n_test]
        trunc = cfg.eval.truncation if truncation == "config" else truncation
        meta = {
            "seed": cfg.seed,
            "config_hash": cfg.hash_bytes().hex(),
            "transfer": cfg.transfer,
            "strategy": cfg.strategy.variant,
            "similarity_source": cfg.similarity_source,
            "epochs_completed": self.epoch_done,
            "pretrain_epochs_completed": self.pretrain_done,
        }
        return evaluate(self.models.gen, self.data, ks, trunc, cfg.model.cross_metric, meta)

    @property
    def finished(self) -> bool:
        return self.pretrain_done >= self.pretrain_epochs and self.epoch_done >= self.cfg.epochs

    def run(self, stop_after: int | None = None) -> None:
        """Train to completion, or until ``stop_after`` cross-modal epochs are done."""
        while self.pretrain_done < self.pretrain_epochs:
            self.pretrain_epoch()
        limit = self.cfg.epochs if stop_after is None else min(stop_after, self.cfg.epochs)
        while self.epoch_done < limit:
            rec = self.main_epoch()
            log.info("epoch %d L_G=%.4f L_D=%.4f L_sim=%.4f", rec["phase_epoch"],
                     rec["L_G"], rec["L_D"], rec["L_sim"])

    # -- checkpoints

    def checkpoint(self) -> "Checkpoint":
        arrays = {}
        for name, net in self.models.nets().items():
            for k, p in enumerate(net.params()):
                arrays[f"{name}/{k}"] = p.copy()
        opt_meta = {}
        for name in OPT_ORDER:
            st = self.opts[name]
            opt_meta[name] = {"kind": st.kind, "learning_rate": st.learning_rate,
                              "step": st.step, "has_moments": bool(st.m)}
            for k, (mm, vv) in enumerate(zip(st.m, st.v)):
                arrays[f"opt/{name}/m{k}"] = mm.copy()
                arrays[f"opt/{name}/v{k}"] = vv.copy()
        meta = {
            "tool_version": __version__,
            "config": self.cfg.to_dict(),
            "dims": {"d_v": self.data.d_v, "d_t": self.data.d_t, "c": self.data.n_classes},
            "pretrain_done": self.pretrain_done,
            "epoch_done": self.epoch_done,
            "rng": {"seed": self.rng.seed, "scheme": "per-epoch named streams"},
            "optimizers": opt_meta,
            "records": self.log.records,
            "steps": self.log.steps,
        }
        return Checkpoint(self.cfg.hash_bytes(), arrays, meta)

    @classmethod
    def from_checkpoint(cls, ckpt: "Checkpoint", dataset: MultimodalDataset,
                        cfg: ExperimentConfig | None = None) -> "Trainer":
        stored = ExperimentConfig.from_dict(ckpt.meta["config"])
        cfg = cfg or stored
        if cfg.hash_bytes() != ckpt.config_hash:
            raise CheckpointError(
                "checkpoint was written under a different configuration "
                f"(hash {ckpt.config_hash.hex()[:16]}..., expected "
                f"{cfg.hash_bytes().hex()[:16]}...); refusing to load"
            )
        dims = ckpt.meta["dims"]
        if (dims["d_v"], dims["d_t"], dims["c"]) != (dataset.d_v, dataset.d_t, dataset.n_classes):
            raise CheckpointError(
                f"checkpoint expects d_v={dims['d_v']}, d_t={dims['d_t']}, c={dims['c']} "
                f"but dataset has d_v={dataset.d_v}, d_t={dataset.d_t}, c={dataset.n_classes}"
            )
        tr = cls(cfg, dataset)
        for name, net in tr.models.nets().items():
            net.set_params([ckpt.arrays[f"{name}/{k}"] for k in range(len(net.params()))])
        for name in OPT_ORDER:
            info = ckpt.meta["optimizers"][name]
            st = tr.opts[name]
            st.kind, st.learning_rate, st.step = info["kind"], info["learning_rate"], info["step"]
            if info["has_moments"]:
                n = len(tr._opt_params(name))
                st.m = [ckpt.arrays[f"opt/{name}/m{k}"].copy() for k in range(n)]
                st.v = [ckpt.arrays[f"opt/{name}/v{k}"].copy() for k in range(n)]
        tr.pretrain_done = ckpt.meta["pretrain_done"]
        tr.epoch_done = ckpt.meta["epoch_done"]
        tr.log = MetricsLog(list(ckpt.meta["records"]), list(ckpt.meta.get("steps", [])))
        return tr

    def _opt_params(self, name):
        m = self.models
        return {
            "siamese_v": m.h_v.net.params(),
            "siamese_t": m.h_t.net.params(),
            "generator": m.gen.g_v.params() + m.gen.g_t.params() + m.clf.net.params(),
            "discriminator": m.disc.net.params(),
        }[name]


# --------------------------------------------------------------------------- checkpoint file


_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


@dataclass
class Checkpoint:
    """Binary layout (all little-endian)::

        b"CMSTCKPT" | u8 version | 32-byte config SHA-256 | u32 block count
        per block: u16 name length | name (UTF-8) | u32 rows | u32 cols
                   | u64 payload bytes | float64 payload (row-major)
        u32 metadata length | metadata JSON (UTF-8)

    Vectors are stored as 1 x n blocks.
    """

    config_hash: bytes
    arrays: dict
    meta: dict

    def to_bytes(self) -> bytes:
        out = [CKPT_MAGIC, bytes([CKPT_VERSION]), self.config_hash, _U32.pack(len(self.arrays))]
        for name, arr in self.arrays.items():
            a = np.ascontiguousarray(arr, dtype="<f8")
            rows, cols = (1, a.size) if a.ndim == 1 else a.shape
            raw = name.encode("utf-8")
            payload = a.tobytes()
            out += [_U16.pack(len(raw)), raw, _U32.pack(rows), _U32.pack(cols),
                    _U64.pack(len(payload)), payload]
        meta = json.dumps(self.meta).encode("utf-8")
        out += [_U32.pack(len(meta)), meta]
        return b"".join(out)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        def take(n):
            nonlocal pos
            if pos + n > len(raw):
                raise CheckpointError("checkpoint file is truncated")
            chunk = raw[pos:pos + n]
            pos += n
            return chunk

        pos = 0
        if take(8) != CKPT_MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        version = take(1)[0]
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        chash = take(32)
        (count,) = _U32.unpack(take(4))
        arrays = {}
        for _ in range(count):
            (nlen,) = _U16.unpack(take(2))
            name = take(nlen).decode("utf-8")
            (rows,) = _U32.unpack(take(4))
            (cols,) = _U32.unpack(take(4))
            (nbytes,) = _U64.unpack(take(8))
            if nbytes != rows * cols * 8:
                raise CheckpointError(f"block {name}: length {nbytes} != {rows}x{cols} floats")
            arr = np.frombuffer(take(nbytes), dtype="<f8").reshape(rows, cols).astype(np.float64)
            # biases travel as 1 x n rows
            arrays[name] = arr[0].copy() if _is_vector_block(name) else arr
        (mlen,) = _U32.unpack(take(4))
        meta = json.loads(take(mlen).decode("utf-8"))
        if pos != len(raw):
            raise CheckpointError("trailing bytes after checkpoint metadata")
        return cls(chash, arrays, meta)


def _is_vector_block(name: str) -> bool:
    # parameter k is a weight matrix for even k and a bias vector for odd k
    tail = name.rsplit("/", 1)[-1].lstrip("mv")
    return tail.isdigit() and int(tail) % 2 == 1


def save_checkpoint(path, trainer_or_ckpt) -> Path:
    ckpt = trainer_or_ckpt.checkpoint() if isinstance(trainer_or_ckpt, Trainer) else trainer_or_ckpt
    path = Path(path)
    path.write_bytes(ckpt.to_bytes())
    return path


def load_checkpoint(path, expected: ExperimentConfig | None = None) -> Checkpoint:
    ckpt = Checkpoint.from_bytes(Path(path).read_bytes())
    if expected is not None and expected.hash_bytes() != ckpt.config_hash:
        raise CheckpointError(
            "config hash mismatch: the checkpoint was trained with a different "
            "configuration (e.g. another d_s); refusing to load"
        )
    return ckpt


# --------------------------------------------------------------------------- experiment


def resolve_dataset(cfg: ExperimentConfig) -> MultimodalDataset:
    if cfg.data_path:
        return load_dataset(cfg.data_path)
    return generate_synthetic(cfg.data)


def run_experiment(cfg: ExperimentConfig, dataset: MultimodalDataset | None = None,
                   out_dir=None, resume: Checkpoint | None = None,
                   stop_after: int | None = None):
    """Run a full experiment. Returns ``(checkpoint, metrics_log, report)``.

    With ``out_dir`` set, writes ``checkpoint.bin``, ``metrics.jsonl`` and
    ``report.json`` there; on divergence the partial metrics log is still written.
    """
    cfg.validate()
    dataset = dataset if dataset is not None else resolve_dataset(cfg)
    trainer = Trainer.from_checkpoint(resume, dataset, cfg) if resume else Trainer(cfg, dataset)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    try:
        trainer.run(stop_after)
    except DivergenceError:
        if out is not None:
            trainer.log.write(out / "metrics.jsonl")
        raise
    report = trainer.evaluate()
    ckpt = trainer.checkpoint()
    if out is not None:
        save_checkpoint(out / "checkpoint.bin", ckpt)
        trainer.log.write(out / "metrics.jsonl")
        (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    return ckpt, trainer.log, report
