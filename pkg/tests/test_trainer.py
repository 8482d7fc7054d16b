import numpy as np
import pytest
from scipy.stats import chisquare

from cida import autodiff as ad
from cida.datasets import Dataset, IndexNormalization, gen_circle, gen_circle_2d, gen_sine
from cida.losses import domain_loss
from cida.models import build_models, decide
from cida.trainer import (
    METHODS,
    Checkpoint,
    CheckpointError,
    ConfigError,
    ExperimentConfig,
    TrainingDiverged,
    category_bins,
    checkpoint_text,
    flatten_models,
    grl_iteration,
    history_csv,
    load_checkpoint,
    make_state,
    sample_batch,
    sample_both,
    save_checkpoint,
    train,
    train_iteration,
)


def _small(method="cida", **kw):
    return ExperimentConfig(method=method, **{"iterations": 50, **kw})


class TestConfig:
    def test_round_trip(self):
        cfg = ExperimentConfig(method="pcida-gmm", lambda_d=0.5, seed=2**63 - 1, index_normalization="1:30")
        assert ExperimentConfig.from_text(cfg.to_text()) == cfg

    @pytest.mark.parametrize(
        "text",
        [
            "lamda_d = 2\n",
            "method = cida\nmethod = pcida\n",
            "lambda_d = -1\n",
            "batch_source = 0\n",
            "iterations = many\n",
            "index_normalization = 3:3\n",
            "just words\n",
            "method = dann\n",
        ],
    )
    def test_errors(self, text):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_text(text)

    def test_comments_and_blank_lines(self):
        cfg = ExperimentConfig.from_text("# sweep\n\nmethod = pcida  # gaussian head\n")
        assert cfg.method == "pcida" and cfg.disc_kind == "gaussian"

    def test_methods(self):
        assert set(METHODS) == {"source-only", "cida", "pcida", "pcida-gmm", "categorical-baseline"}


class TestSampleBatch:
    def test_source_batch(self):
        data = gen_circle(0, 100)
        b = sample_batch(data, "source", 32, np.random.default_rng(0))
        assert len(b.rows) == 32 and data.is_source[b.rows].all() and b.y is not None

    def test_target_batches_have_no_labels(self):
        data = gen_circle(0, 5)
        for split in ("target", "both"):
            assert sample_batch(data, split, 8, np.random.default_rng(0)).y is None

    def test_same_rng_state_same_batch(self):
        data = gen_sine(0, 10)
        a = sample_batch(data, "both", 16, np.random.default_rng(7))
        b = sample_batch(data, "both", 16, np.random.default_rng(7))
        assert np.array_equal(a.rows, b.rows)

    def test_both_split_proportion(self):
        data = Dataset(np.zeros((100, 1)), np.arange(100.0), np.zeros(100), np.arange(100) < 60)
        rows = sample_batch(data, "both", 100_000, np.random.default_rng(0)).rows
        n_src = int(data.is_source[rows].sum())
        assert chisquare([n_src, 100_000 - n_src], [60_000, 40_000]).pvalue > 0.001

    def test_sample_both_composition(self):
        data = gen_circle(0, 10)
        b = sample_both(data, 5, 7, np.random.default_rng(0))
        assert b.y is None and len(b.rows) == 12
        assert data.is_source[b.rows[:5]].all() and not data.is_source[b.rows[5:]].any()
        assert np.array_equal(b.x, data.x[b.rows])

    def test_empty_split(self):
        data = Dataset(np.zeros((3, 1)), [1.0, 2.0, 3.0], [0, 1, 0], [True] * 3)
        with pytest.raises(ValueError):
            sample_batch(data, "target", 4, np.random.default_rng(0))


def test_category_bins_are_equal_mass():
    data = gen_circle(0, 20)
    labels = category_bins(data, 5)
    assert (labels[data.is_source] == 0).all()
    counts = np.bincount(labels[~data.is_source])[1:]
    assert len(counts) == 4 and counts.max() - counts.min() <= 20


def _state(data, cfg):
    models = build_models(data.d_x, data.d_u, 2, cfg.disc_kind, seed=cfg.seed)
    return make_state(models, cfg.lr)


def _params(models):
    return np.concatenate([p.data.ravel() for net in models.networks() for p in net.parameters()])


class TestTrainIteration:
    def test_lambda_zero_has_no_domain_gradient(self):
        data = gen_circle(0, 10)
        norm = IndexNormalization.fit(data.u)
        un = norm.transform(data.u)
        rng = np.random.default_rng(0)
        src, both = sample_batch(data, "source", 8, rng, un), sample_batch(data, "both", 16, rng, un)
        a = _state(data, _small(lambda_d=0.0))
        b = _state(data, _small("source-only"))
        train_iteration(a, src, both, _small(lambda_d=0.0))
        train_iteration(b, src, both, _small("source-only"))
        for p, q in zip(a.opt_ef.params, b.opt_ef.params):
            assert p.data.tobytes() == q.data.tobytes()

    def test_returns_post_step_terms(self):
        data = gen_sine(0, 10)
        cfg = _small("pcida")
        st = _state(data, cfg)
        rng = np.random.default_rng(1)
        v_p, v_d = train_iteration(st, sample_batch(data, "source", 8, rng), sample_batch(data, "both", 8, rng), cfg)
        assert np.isfinite(v_p) and np.isfinite(v_d)

    @pytest.mark.parametrize("method", ["cida", "pcida", "pcida-gmm", "categorical-baseline"])
    def test_discriminator_step_descends(self, method):
        data = gen_circle(0, 10)
        norm = IndexNormalization.fit(data.u)
        un = norm.transform(data.u)
        bins = category_bins(data, 5)
        kind = METHODS[method]
        improved = 0
        for trial in range(100):
            cfg = ExperimentConfig(method=method, seed=trial, lr=1e-4)
            st = _state(data, cfg)
            st.bin_labels = bins
            rng = np.random.default_rng([trial, 9])
            src, both = sample_batch(data, "source", 32, rng, un), sample_batch(data, "both", 64, rng, un)
            models = st.models

            def d_loss():
                with ad.no_grad():
                    z = models.encoder(both.x, both.u)
                    return float(domain_loss(kind, models.discriminator(z), both.u, bins[both.rows]).data)

            before = d_loss()
            # Step A only: freeze E,F by giving them a zero learning rate
            st.opt_ef.state.lr = 0.0
            train_iteration(st, src, both, cfg)
            improved += d_loss() <= before
        assert improved >= 95

    def test_non_finite_aborts_with_iteration(self):
        data = gen_circle(0, 5)
        data.x[0] = np.nan
        with pytest.raises(TrainingDiverged, match="iteration 1"):
            train(_small("source-only", iterations=5), data)

    def test_grl_iteration_updates_both_players(self):
        data = gen_circle(0, 10)
        cfg = _small()
        st = _state(data, cfg)
        rng = np.random.default_rng(3)
        src, both = sample_batch(data, "source", 8, rng), sample_batch(data, "both", 8, rng)
        v_p, v_d = grl_iteration(st, src, both, cfg)
        assert np.isfinite(v_p) and v_d >= 0


class TestTrain:
    def test_zero_iterations_keeps_init(self):
        data = gen_circle(0, 5)
        res = train(_small(iterations=0), data)
        fresh = build_models(2, 1, 2, "point", seed=0)
        from cida.models import standardization

        fresh.encoder.x_shift, fresh.encoder.x_scale = standardization(data.x)
        assert res.checkpoint.params.tobytes() == flatten_models(fresh)[1].tobytes()
        assert res.history == []

    def test_deterministic(self):
        data = gen_sine(1, 10)
        a, b = train(_small("pcida-gmm", iterations=120), data), train(_small("pcida-gmm", iterations=120), data)
        assert checkpoint_text(a.checkpoint) == checkpoint_text(b.checkpoint)
        assert history_csv(a.history) == history_csv(b.history)

    def test_seed_changes_result(self):
        data = gen_sine(1, 10)
        assert train(_small(seed=1), data).checkpoint != train(_small(seed=2), data).checkpoint

    def test_target_labels_are_never_read(self):
        data = gen_circle_2d(0, 4)
        poisoned = data.subset(np.arange(len(data)))
        rng = np.random.default_rng(0)
        tgt = ~poisoned.is_source
        poisoned.y[tgt] = rng.integers(-1, 2, size=tgt.sum())
        for method in ("cida", "categorical-baseline"):
            a = train(_small(method, iterations=100), data).checkpoint
            b = train(_small(method, iterations=100), poisoned).checkpoint
            assert a == b

    def test_lambda_zero_matches_source_only(self):
        data = gen_circle(0, 10)
        a = train(_small("cida", lambda_d=0.0, iterations=200), data)
        b = train(_small("source-only", iterations=200), data)
        for p, q in zip(a.models.encoder.net.parameters() + a.models.predictor.net.parameters(),
                        b.models.encoder.net.parameters() + b.models.predictor.net.parameters()):
            assert p.data.tobytes() == q.data.tobytes()

    def test_history_every_hundred_and_encoder_objective(self):
        res = train(_small(iterations=300), gen_circle(0, 5))
        assert [h[0] for h in res.history] == [100, 200, 300]
        assert all(h[2] >= 0 for h in res.history)
        from cida.losses import value_terms

        for _, v_p, v_d in res.history:
            assert value_terms(v_p, v_d, 2.0).encoder_objective == v_p - 2.0 * v_d

    def test_source_only_history_has_empty_domain_column(self):
        res = train(_small("source-only", iterations=100), gen_circle(0, 5))
        assert history_csv(res.history).splitlines()[1].endswith(",")

    def test_source_only_fits_source_domains(self):
        data = gen_circle(0, 100)
        res = train(ExperimentConfig(method="source-only", iterations=5000), data)
        src = data.subset(data.split_indices("source"))
        with ad.no_grad():
            logits = res.models.predictor(res.models.encoder(src.x, res.checkpoint.normalization.transform(src.u)))
        assert (decide(logits) == src.y).mean() >= 0.95

    def test_needs_target_rows(self):
        data = Dataset(np.zeros((4, 2)), [1.0, 2.0, 3.0, 4.0], [0, 1, 0, 1], [True] * 4)
        with pytest.raises(ValueError):
            train(_small(), data)


class TestCheckpoint:
    def _ckpt(self, method="pcida-gmm", data=None):
        data = data or gen_circle_2d(0, 3)
        return train(_small(method, iterations=20), data).checkpoint

    @pytest.mark.parametrize("method", sorted(METHODS))
    def test_round_trip_bit_exact(self, tmp_path, method):
        ck = self._ckpt(method)
        save_checkpoint(ck, tmp_path / "c.txt")
        back = load_checkpoint(tmp_path / "c.txt")
        assert back == ck and back.params.tobytes() == ck.params.tobytes()
        assert checkpoint_text(back) == checkpoint_text(ck)

    def test_header_layout(self):
        lines = checkpoint_text(self._ckpt("cida", gen_circle(0, 2))).splitlines()
        assert lines[0] == "CIDA-CKPT v1" and lines[1] == "cida"
        assert lines[2] == "3 100 100 20;20 100 2;20 100 100 1"
        assert lines[3] == "2.0 0.0001 0 20 0.0001" and lines[4] == "1.0:30.0"

    def test_truncated(self, tmp_path):
        text = checkpoint_text(self._ckpt())
        (tmp_path / "t.txt").write_text("\n".join(text.splitlines()[:-7]) + "\n")
        with pytest.raises(CheckpointError, match="manifest"):
            load_checkpoint(tmp_path / "t.txt")

    def test_version(self, tmp_path):
        text = checkpoint_text(self._ckpt()).replace("CIDA-CKPT v1", "CIDA-CKPT v2", 1)
        (tmp_path / "v.txt").write_text(text)
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(tmp_path / "v.txt")

    def test_bad_value_line_number(self, tmp_path):
        lines = checkpoint_text(self._ckpt()).splitlines()
        lines[9] = "oops"
        (tmp_path / "b.txt").write_text("\n".join(lines) + "\n")
        with pytest.raises(CheckpointError, match="line 10"):
            load_checkpoint(tmp_path / "b.txt")

    def test_count_mismatch_on_construction(self):
        with pytest.raises(CheckpointError):
            Checkpoint("cida", [[2, 2]], 1.0, 1e-4, 0, 2, 1e-4, IndexNormalization((0.0,), (1.0,)), np.zeros(5))

    def test_reloaded_models_reproduce_predictions(self, tmp_path):
        data = gen_circle(0, 5)
        res = train(_small(iterations=30), data)
        save_checkpoint(res.checkpoint, tmp_path / "c.txt")
        models = load_checkpoint(tmp_path / "c.txt").to_models()
        un = res.checkpoint.normalization.transform(data.u)
        with ad.no_grad():
            live = res.models.predictor(res.models.encoder(data.x, un)).data
            back = models.predictor(models.encoder(data.x, un)).data
        assert np.allclose(live, back, rtol=1e-10, atol=1e-10)
