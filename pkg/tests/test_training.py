import json

import numpy as np
import pytest

import cmst.training as training
from cmst.common_space import adversarial_losses, project
from cmst.errors import CheckpointError, ConfigError, DivergenceError
from cmst.nn_core import param_digest
from cmst.training import (
    Checkpoint,
    ExperimentConfig,
    MetricsLog,
    Trainer,
    load_checkpoint,
    run_experiment,
    save_checkpoint,
)
from conftest import small_config


def all_digest(trainer):
    return param_digest(list(trainer.models.nets().values()))


class TestConfig:
    def test_defaults(self):
        cfg = ExperimentConfig()
        assert cfg.epochs == 100 and cfg.batch_size == 64
        assert cfg.strategy.variant == "two-stage"
        assert cfg.strategy.siamese_pretrain_epochs == 50
        assert cfg.strategy.finetune_lr == 1e-4
        assert cfg.transfer == "difference" and cfg.similarity_source == "siamese"
        assert cfg.model.margin == 1.0 and cfg.eval.ks == [1, 5, 10, 50]

    def test_round_trip(self):
        cfg = small_config(transfer="value")
        again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert again == cfg and again.hash_bytes() == cfg.hash_bytes()

    @pytest.mark.parametrize("doc,field", [
        ({"transfer": "ratio"}, "transfer"),
        ({"strategy": {"variant": "greedy"}}, "strategy.variant"),
        ({"model": {"d_s": 0}}, "model.d_s"),
        ({"model": {"widths": 3}}, "model.widths"),
        ({"data": {"n_classes": 1}}, "data.n_classes"),
        ({"epochs": "ten"}, "epochs"),
        ({"batch_size": 1}, "batch_size"),
    ])
    def test_errors_name_the_field(self, doc, field):
        with pytest.raises(ConfigError) as info:
            ExperimentConfig.from_dict(doc)
        assert info.value.field == field

    def test_hash(self):
        a = small_config()
        assert a.hash_bytes() == small_config(data_path="/elsewhere").hash_bytes()
        assert a.hash_bytes() != small_config(model={"d_s": 6}).hash_bytes()


class TestTrainStep:
    def test_zero_learning_rates(self, small_dataset):
        cfg = small_config(optimizer={"lr": 0.0}, strategy={"variant": "end-to-end"})
        tr = Trainer(cfg, small_dataset)
        before = all_digest(tr)
        tr.run(stop_after=2)
        assert all_digest(tr) == before
        for rec in tr.log.records:
            assert np.isfinite(rec["L_G"]) and rec["L_lab"] > 0

    def test_no_transfer_logs_zero_similarity_loss(self, small_dataset):
        tr = Trainer(small_config(transfer="none", log_steps=True), small_dataset)
        tr.run()
        assert tr.log.phase("pretrain") == []
        assert all(s["L_sim"] == 0.0 for s in tr.log.steps)
        assert all(r["L_sim"] == 0.0 for r in tr.log.records)

    def test_generator_sees_updated_discriminator(self, small_dataset):
        tr = Trainer(small_config(), small_dataset)
        m = tr.models
        batch = small_dataset.train_idx[:16]
        V, T = small_dataset.V[batch], small_dataset.T[batch]
        s_v, s_t = project(m.gen, V, T)
        old_disc = m.disc.net.copy()
        rec = tr.train_step(batch, np.random.default_rng(0))
        new = adversarial_losses(m.disc, s_v, s_t)
        old = adversarial_losses(type(m.disc)(old_disc), s_v, s_t)
        assert (rec["L_V_gen"], rec["L_T_gen"]) == new
        assert (rec["L_V"], rec["L_T"]) == old
        assert new != old

    def test_discriminator_identity_each_step(self, small_dataset):
        tr = Trainer(small_config(log_steps=True), small_dataset)
        tr.run()
        for s in tr.log.steps:
            assert abs(s["L_D"] + (s["L_V"] - s["L_T"])) <= 1e-12

    def test_symmetric_objective(self, small_dataset):
        tr = Trainer(small_config(adversarial="symmetric", log_steps=True), small_dataset)
        tr.run(stop_after=1)
        for s in tr.log.steps:
            assert s["L_D"] == pytest.approx(s["L_V"] + s["L_T"], abs=1e-12)


class TestStrategies:
    def test_two_stage_freezes(self, small_dataset):
        tr = Trainer(small_config(), small_dataset)
        tr.run()
        pre, main = tr.log.phase("pretrain"), tr.log.phase("main")
        assert len(pre) == 2 and len(main) == 4
        assert {r["siamese_digest"] for r in main} == {pre[-1]["siamese_digest"]}
        assert all(r["siamese_lr"] == 0.0 for r in main)

    def test_fine_tune_uses_small_rate(self, small_dataset, monkeypatch):
        tr = Trainer(small_config(strategy={"variant": "fine-tune"}), small_dataset)
        seen = []
        real = training.optimizer_step

        def spy(state, params, grads):
            if state is tr.opts["siamese_v"] or state is tr.opts["siamese_t"]:
                seen.append((tr.epoch_done, state.learning_rate))
            return real(state, params, grads)

        monkeypatch.setattr(training, "optimizer_step", spy)
        tr.run()
        main = tr.log.phase("main")
        assert all(r["siamese_lr"] == 1e-4 for r in main)
        assert len({r["siamese_digest"] for r in main}) == len(main)
        assert seen and all(lr == 1e-4 for _, lr in seen)

    def test_end_to_end_has_no_pretraining(self, small_dataset):
        tr = Trainer(small_config(strategy={"variant": "end-to-end"}), small_dataset)
        tr.run()
        assert tr.log.phase("pretrain") == []
        assert all(r["siamese_lr"] == 1e-3 for r in tr.log.records)
        assert tr.log.records[0]["phase"] == "main"

    @pytest.mark.parametrize("source", ["euclidean", "cosine"])
    def test_raw_sources_skip_siamese(self, small_dataset, source):
        tr = Trainer(small_config(similarity_source=source), small_dataset)
        before = tr.models.siamese_digest()
        tr.run()
        assert tr.log.phase("pretrain") == []
        assert tr.models.siamese_digest() == before
        assert all(r["L_sia"] is None for r in tr.log.records)


class TestDeterminismAndResume:
    def test_identical_runs(self, small_cfg, small_dataset):
        _, log_a, rep_a = run_experiment(small_cfg, small_dataset)
        _, log_b, rep_b = run_experiment(small_config(), small_dataset)
        assert log_a.to_jsonl() == log_b.to_jsonl()
        assert rep_a.to_json() == rep_b.to_json()

    def test_different_seed_differs(self, small_dataset):
        _, log_a, _ = run_experiment(small_config(seed=1), small_dataset)
        _, log_b, _ = run_experiment(small_config(seed=2), small_dataset)
        assert log_a.to_jsonl() != log_b.to_jsonl()

    @pytest.mark.parametrize("variant", ["two-stage", "fine-tune", "end-to-end"])
    def test_resume_is_bit_exact(self, small_dataset, tmp_path, variant):
        cfg = small_config(strategy={"variant": variant})
        straight, log_s, rep_s = run_experiment(cfg, small_dataset)
        half, _, _ = run_experiment(cfg, small_dataset, tmp_path / "half", stop_after=2)
        ckpt = load_checkpoint(tmp_path / "half" / "checkpoint.bin", cfg)
        final, log_r, rep_r = run_experiment(cfg, small_dataset, resume=ckpt)
        assert log_r.to_jsonl() == log_s.to_jsonl()
        assert rep_r.to_json() == rep_s.to_json()
        assert final.to_bytes() == straight.to_bytes()

    def test_checkpoint_round_trip(self, small_cfg, small_dataset):
        tr = Trainer(small_cfg, small_dataset)
        tr.run(stop_after=1)
        ckpt = tr.checkpoint()
        again = Checkpoint.from_bytes(ckpt.to_bytes())
        assert again.config_hash == ckpt.config_hash and again.meta == ckpt.meta
        for name, arr in ckpt.arrays.items():
            assert again.arrays[name].shape == arr.shape
            assert again.arrays[name].tobytes() == arr.tobytes()
        restored = Trainer.from_checkpoint(again, small_dataset)
        assert all_digest(restored) == all_digest(tr)

    def test_layout(self, small_cfg, small_dataset, tmp_path):
        tr = Trainer(small_cfg, small_dataset)
        raw = save_checkpoint(tmp_path / "c.bin", tr).read_bytes()
        assert raw[:8] == b"CMSTCKPT" and raw[8] == 1
        assert raw[9:41] == small_cfg.hash_bytes()

    def test_wrong_config_refused(self, small_cfg, small_dataset, tmp_path):
        path = save_checkpoint(tmp_path / "c.bin", Trainer(small_cfg, small_dataset))
        other = small_config(model={"d_s": 6})
        with pytest.raises(CheckpointError, match="hash"):
            load_checkpoint(path, other)
        with pytest.raises(CheckpointError):
            Trainer.from_checkpoint(load_checkpoint(path), small_dataset, other)

    def test_corrupt_files(self, small_cfg, small_dataset, tmp_path):
        raw = Trainer(small_cfg, small_dataset).checkpoint().to_bytes()
        with pytest.raises(CheckpointError, match="magic"):
            Checkpoint.from_bytes(b"NOTACKPT" + raw[8:])
        with pytest.raises(CheckpointError, match="version"):
            Checkpoint.from_bytes(raw[:8] + b"\x02" + raw[9:])
        with pytest.raises(CheckpointError, match="truncated"):
            Checkpoint.from_bytes(raw[:-10])


class TestRunExperiment:
    def test_artifacts(self, small_cfg, small_dataset, tmp_path):
        _, log, rep = run_experiment(small_cfg, small_dataset, tmp_path)
        assert (tmp_path / "checkpoint.bin").exists()
        assert MetricsLog.read(tmp_path / "metrics.jsonl").records == \
            json.loads(json.dumps(log.records))
        assert (tmp_path / "report.json").read_text() == rep.to_json() + "\n"

    def test_log_shape(self, small_cfg, small_dataset):
        _, log, rep = run_experiment(small_cfg, small_dataset)
        assert [r["epoch"] for r in log.records] == list(range(6))
        snaps = [r["eval"] for r in log.phase("main")]
        assert [s is not None for s in snaps] == [False, True, False, True]
        assert snaps[-1]["map_avg"] == rep.map_avg
        assert rep.metadata["epochs_completed"] == 4
        assert rep.metadata["pretrain_epochs_completed"] == 2

    def test_divergence_keeps_partial_log(self, small_dataset, tmp_path):
        cfg = small_config(divergence_threshold=1.5, strategy={"siamese_pretrain_epochs": 0})
        with pytest.raises(DivergenceError):
            run_experiment(cfg, small_dataset, tmp_path)
        assert (tmp_path / "metrics.jsonl").exists()

    def test_metrics_log_requires_consecutive_epochs(self):
        log = MetricsLog()
        log.append({"epoch": 0})
        with pytest.raises(ValueError):
            log.append({"epoch": 2})
