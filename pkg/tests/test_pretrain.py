import csv
from dataclasses import replace

import numpy as np
import pytest

from ega.codec import CodecModel
from ega.errors import ConfigError
from ega.pretrain import (
    PretrainConfig,
    generate_dataset,
    group_loss,
    group_loss_and_grads,
    normalized_error,
    sweep,
    sweep_configs,
    train_codec,
    write_sweep_csv,
)
from ega.seeding import make_rng

TINY = PretrainConfig(b=8, h=6, s=4, m=3, epochs=3, train_groups=64, test_groups=32, batch_size=16)


class TestDataset:
    def test_shape_and_range(self):
        data = generate_dataset(1, 4, 1, 2, make_rng(0))
        assert data.shape == (1, 2, 4)
        assert set(np.unique(data)) <= {-1, 0, 1}

    def test_uniform_chi_square(self):
        s = 3
        draws = generate_dataset(10_000, 100, s, 1, make_rng(1)).ravel()
        counts = np.bincount(draws + s, minlength=2 * s + 1)
        expected = draws.size / (2 * s + 1)
        chi2 = float(np.sum((counts - expected) ** 2 / expected))
        # 0.99 quantile of chi-square with 6 degrees of freedom
        assert chi2 < 16.812

    def test_seeded(self):
        a = generate_dataset(5, 8, 4, 3, make_rng(2, "data"))
        b = generate_dataset(5, 8, 4, 3, make_rng(2, "data"))
        np.testing.assert_array_equal(a, b)


class TestGroupLoss:
    def test_gradients_match_finite_differences(self):
        model = CodecModel.build(6, 4, 3, 3, hidden=8, rng=np.random.default_rng(0))
        for net in (model.encoder, model.decoder):
            for w in net.weights:
                w += np.random.default_rng(1).normal(scale=0.2, size=w.shape)
        groups = generate_dataset(5, 6, 3, 3, make_rng(3))
        _, grads = group_loss_and_grads(model, groups)
        params = model.encoder.params + model.decoder.params
        eps = 1e-6
        for p, g in zip(params, grads):
            flat = p.reshape(-1)
            for i in range(0, flat.size, max(1, flat.size // 7)):
                old = flat[i]
                flat[i] = old + eps
                up = group_loss(model, groups)
                flat[i] = old - eps
                down = group_loss(model, groups)
                flat[i] = old
                numeric = (up - down) / (2 * eps)
                assert abs(g.reshape(-1)[i] - numeric) <= 1e-5 * max(1.0, abs(numeric))

    def test_target_is_group_mean(self):
        codec = CodecModel.build(4, 4, 2, 2, rng=0)
        groups = np.zeros((3, 2, 4), dtype=int)
        out = codec.decode_mean(codec.encode_blocks(groups.reshape(-1, 4)).reshape(3, 2, 4).mean(axis=1))
        assert group_loss(codec, groups) == pytest.approx(np.mean((out / 2) ** 2))


class TestTrainCodec:
    def test_config_validation(self):
        with pytest.raises(ConfigError):
            PretrainConfig(m=0)
        with pytest.raises(ConfigError):
            PretrainConfig(learning_rate=0.0)

    def test_desk_preset(self):
        cfg = PretrainConfig.desk(s=64)
        assert (cfg.epochs, cfg.train_groups, cfg.batch_size, cfg.s) == (20, 1000, 16, 64)
        assert PretrainConfig().batch_size == 64

    def test_best_epoch_is_minimum(self):
        model, report = train_codec(TINY)
        assert report.best_epoch == int(np.argmin(report.test_loss))
        assert model.sigma_hat == pytest.approx(TINY.s * np.sqrt(min(report.test_loss)))
        assert len(report.train_loss) == TINY.epochs

    def test_deterministic(self):
        a, _ = train_codec(TINY)
        b, _ = train_codec(TINY)
        c, _ = train_codec(replace(TINY, seed=1))
        np.testing.assert_array_equal(a.encoder.flat_params(), b.encoder.flat_params())
        assert not np.array_equal(a.encoder.flat_params(), c.encoder.flat_params())

    def test_desk_training_reduces_test_loss(self, codecs):
        from conftest import DESK

        report = codecs.report(DESK)
        assert report.best_test_loss < report.initial_test_loss
        # frozen from the reference run: the desk codec removes most of the
        # group-mean variance it starts from
        assert report.best_test_loss / report.initial_test_loss == pytest.approx(0.267, abs=0.03)
        assert codecs.get(DESK).sigma_hat == pytest.approx(1.13, rel=0.05)

    def test_single_vector_groups_are_easier(self):
        base = PretrainConfig(b=64, h=64, s=8, m=5, epochs=20, train_groups=5000, test_groups=500, batch_size=16)
        one, _ = train_codec(replace(base, m=1))
        five, _ = train_codec(base)
        assert one.sigma_hat < five.sigma_hat


class TestSweep:
    def test_grid(self):
        cfgs = sweep_configs(TINY, ms=[2, 3], ss=[4], bs=[8, 16], seeds=[0, 1], h_ratio=0.5)
        assert len(cfgs) == 8
        assert {(c.b, c.h) for c in cfgs} == {(8, 4), (16, 8)}

    def test_single_cell_equals_train_codec(self, tmp_path):
        rows = sweep([TINY])
        model, report = train_codec(TINY)
        assert rows[0]["sigma_hat"] == model.sigma_hat
        assert rows[0]["best_test_loss"] == report.best_test_loss
        path = tmp_path / "sweep.csv"
        write_sweep_csv(rows, path)
        with open(path) as fh:
            read = list(csv.DictReader(fh))
        assert list(read[0]) == ["m", "s", "b", "h", "seed", "sigma_hat", "best_test_loss", "epochs"]
        assert float(read[0]["sigma_hat"]) == pytest.approx(model.sigma_hat)

    def test_parallel_matches_serial(self):
        cfgs = sweep_configs(TINY, seeds=[0, 1])
        assert sweep(cfgs, workers=2) == sweep(cfgs)

    def test_error_shrinks_with_finer_quantization(self):
        base = PretrainConfig.desk(b=64, h=64, m=5)
        rows = sweep(sweep_configs(base, ss=[8, 64], seeds=[0, 1]))
        err = {s: np.mean([normalized_error(r) for r in rows if r["s"] == s]) for s in (8, 64)}
        assert err[64] <= err[8]

    def test_error_grows_with_block_length(self):
        base = PretrainConfig.desk(h=32, s=8, m=5, hidden=128)
        rows = sweep(sweep_configs(base, bs=[64, 512]))
        small, large = (r["sigma_hat"] for r in rows)
        assert small <= large
