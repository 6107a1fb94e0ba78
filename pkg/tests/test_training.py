import numpy as np
import pytest

from dataclasses import replace

from xmodal import (
    BadConfig,
    Checkpoint,
    DivergenceDetected,
    Encoder,
    GenConfig,
    GradientBundle,
    ModelConfig,
    ModelParams,
    NearZeroNorm,
    TrainConfig,
    TrainLog,
    VersionMismatch,
    generate,
    init_params,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    sgd_step,
    train,
)

GEN = GenConfig(
    num_classes=3,
    num_modalities=2,
    n_train=8,
    n_test=2,
    modality_dims=(6, 5),
    latent_dim=4,
    sigma_intra=0.1,
    seed=7,
)
MODEL = ModelConfig(num_classes=3, modality_dims=(6, 5), embed_dim=4)
TRAIN = TrainConfig(
    iterations=30, batch_size=12, classes_per_batch=3, seed=7, log_every=10
)


def params_equal(a: ModelParams, b: ModelParams) -> bool:
    if not np.array_equal(a.weights, b.weights):
        return False
    for ea, eb in zip(a.encoders, b.encoders):
        for xa, xb in zip(ea.arrays(), eb.arrays()):
            if not np.array_equal(xa, xb):
                return False
    return True


class TestLrSchedule:
    def test_paper_style_schedule(self):
        cfg = replace(TRAIN, iterations=50000, base_lr=0.01, decay_every=20000)
        assert lr_at(0, cfg) == 0.01
        assert lr_at(20000, cfg) == pytest.approx(0.001, rel=1e-12)
        assert lr_at(40000, cfg) == pytest.approx(0.0001, rel=1e-12)

    def test_piecewise_constant_non_increasing(self):
        cfg = replace(TRAIN, iterations=100, decay_every=7, decay_factor=0.5)
        values = [lr_at(i, cfg) for i in range(100)]
        assert all(a >= b for a, b in zip(values, values[1:]))
        assert len(set(values)) == len(set(i // 7 for i in range(100)))


class TestSgdStep:
    def setup_method(self):
        self.params = init_params(MODEL, seed=0)

    def zero_grads(self):
        encs = [
            Encoder(w_in=np.zeros_like(e.w_in), b_in=np.zeros_like(e.b_in))
            for e in self.params.encoders
        ]
        return GradientBundle(
            d_weights=np.zeros_like(self.params.weights),
            d_encoders=encs,
            value=0.0,
            components={},
        )

    def test_zero_gradient_is_identity(self):
        out = sgd_step(self.params, self.zero_grads(), lr=0.5)
        assert params_equal(out, self.params)

    def test_zero_lr_is_identity(self):
        g = self.zero_grads()
        g.d_weights += 1.0
        out = sgd_step(self.params, g, lr=0.0)
        assert params_equal(out, self.params)

    def test_projection_example(self):
        cfg = ModelConfig(num_classes=2, modality_dims=(2,), embed_dim=2)
        params = ModelParams(
            weights=np.array([[1.0, 0.0], [0.0, 1.0]]),
            encoders=[Encoder(w_in=np.eye(2), b_in=np.zeros(2))],
            config=cfg,
        )
        g = GradientBundle(
            d_weights=np.array([[0.0, -1.0], [0.0, 0.0]]),
            d_encoders=[Encoder(w_in=np.zeros((2, 2)), b_in=np.zeros(2))],
            value=0.0,
            components={},
        )
        out = sgd_step(params, g, lr=1.0)
        r2 = np.sqrt(2.0) / 2.0
        np.testing.assert_allclose(out.weights[0], [r2, r2], rtol=0, atol=1e-15)

    def test_weight_rows_stay_unit(self):
        rng = np.random.default_rng(1)
        g = self.zero_grads()
        g.d_weights = rng.standard_normal(self.params.weights.shape)
        out = sgd_step(self.params, g, lr=0.3)
        np.testing.assert_allclose(
            np.linalg.norm(out.weights, axis=1), 1.0, rtol=0, atol=1e-9
        )

    def test_collapsed_row_rejected(self):
        g = self.zero_grads()
        g.d_weights = self.params.weights.copy()
        with pytest.raises(NearZeroNorm):
            sgd_step(self.params, g, lr=1.0)


class TestTrain:
    def setup_method(self):
        self.ds = generate(GEN)

    def test_zero_iterations_returns_initial_params(self):
        ckpt = train(self.ds, MODEL, replace(TRAIN, iterations=0))
        assert params_equal(ckpt.params, init_params(MODEL, seed=TRAIN.seed))
        assert ckpt.log.records == []

    def test_deterministic(self):
        a = train(self.ds, MODEL, TRAIN)
        b = train(self.ds, MODEL, TRAIN)
        assert params_equal(a.params, b.params)
        assert a.log == b.log
        assert a.rng_state == b.rng_state

    def test_loss_decreases_on_easy_data(self):
        cfg = replace(TRAIN, iterations=150, log_every=10)
        ckpt = train(self.ds, MODEL, cfg)
        assert ckpt.log.records[-1].total < ckpt.log.records[0].total

    def test_log_iterations_monotone(self):
        ckpt = train(self.ds, MODEL, TRAIN)
        stamps = [r.iteration for r in ckpt.log.records]
        assert stamps == sorted(stamps)
        assert stamps == [0, 10, 20]

    def test_divergence_detected(self):
        bad_params = init_params(MODEL, seed=0)
        bad_params.weights[0, 0] = np.nan
        poisoned = Checkpoint(
            params=bad_params,
            log=TrainLog(),
            iteration=0,
            rng_state=np.random.default_rng(0).bit_generator.state,
            model_cfg=MODEL,
            train_cfg=TRAIN,
        )
        with np.errstate(invalid="ignore"), pytest.raises(DivergenceDetected):
            train(self.ds, MODEL, TRAIN, resume=poisoned)

    def test_config_validation(self):
        with pytest.raises(BadConfig):
            TrainConfig(iterations=-1)
        with pytest.raises(BadConfig):
            TrainConfig(iterations=1, base_lr=0.0)
        with pytest.raises(BadConfig):
            TrainConfig(iterations=1, decay_factor=1.5)
        with pytest.raises(BadConfig):
            TrainConfig(iterations=1, momentum=1.0)


class TestCheckpointFiles:
    def setup_method(self):
        self.ds = generate(GEN)

    def test_round_trip_bit_identical(self, tmp_path):
        ckpt = train(self.ds, MODEL, TRAIN)
        path = tmp_path / "ckpt.txt"
        save_checkpoint(ckpt, path)
        loaded = load_checkpoint(path)
        assert params_equal(loaded.params, ckpt.params)
        assert loaded.log == ckpt.log
        assert loaded.iteration == ckpt.iteration
        assert loaded.rng_state == ckpt.rng_state
        assert loaded.train_cfg == ckpt.train_cfg
        assert loaded.model_cfg == ckpt.model_cfg
        path2 = tmp_path / "ckpt2.txt"
        save_checkpoint(loaded, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_newer_version_rejected(self, tmp_path):
        ckpt = train(self.ds, MODEL, replace(TRAIN, iterations=2))
        path = tmp_path / "ckpt.txt"
        save_checkpoint(ckpt, path)
        lines = path.read_text().splitlines()
        lines[0] = "xmodal-checkpoint 2"
        (tmp_path / "new.txt").write_text("\n".join(lines) + "\n")
        with pytest.raises(VersionMismatch):
            load_checkpoint(tmp_path / "new.txt")

    def test_resume_equals_uninterrupted(self, tmp_path):
        full = train(self.ds, MODEL, replace(TRAIN, iterations=30))
        half = train(self.ds, MODEL, replace(TRAIN, iterations=15))
        path = tmp_path / "half.txt"
        save_checkpoint(half, path)
        resumed = train(
            self.ds, MODEL, replace(TRAIN, iterations=30), resume=load_checkpoint(path)
        )
        assert params_equal(resumed.params, full.params)
        assert resumed.log == full.log

    def test_resume_with_momentum(self, tmp_path):
        cfg = replace(TRAIN, momentum=0.5)
        full = train(self.ds, MODEL, replace(cfg, iterations=20))
        half = train(self.ds, MODEL, replace(cfg, iterations=10))
        path = tmp_path / "half.txt"
        save_checkpoint(half, path)
        resumed = train(
            self.ds, MODEL, replace(cfg, iterations=20), resume=load_checkpoint(path)
        )
        assert params_equal(resumed.params, full.params)

    def test_intermediate_checkpoints_written(self, tmp_path):
        cfg = replace(TRAIN, iterations=20, checkpoint_every=8)
        train(self.ds, MODEL, cfg, checkpoint_dir=tmp_path)
        assert (tmp_path / "checkpoint_000008.txt").exists()
        assert (tmp_path / "checkpoint_000016.txt").exists()
