import numpy as np
import pytest
import torch
from PIL import Image

from factorkit.config import ExperimentConfig
from factorkit.errors import ContractError, StateError
from factorkit.evaluation import (
    AblationRow,
    MetricsReport,
    edit_attribute,
    edit_success_rates,
    format_table,
    mse,
    read_grid,
    reconstruction_mse,
    render_grid,
    run_ablation,
    table_csv,
)
from factorkit.models import NetworkBundle, PixelRuleOracle, oracle_classify
from factorkit.synthdata import render_sprite


class ConstantOracle(torch.nn.Module):
    """Degenerate classifier that always answers ``value``."""

    trained = True

    def __init__(self, value):
        super().__init__()
        self.value = value
        self.dummy = torch.nn.Parameter(torch.zeros(()))

    def forward(self, x):
        return torch.full((len(x),), float(self.value))


class TestMse:
    def test_identity(self, rng):
        x = rng.random((3, 1, 8, 8))
        assert mse(x, x) == 0.0

    def test_constant_offset(self, rng):
        x = rng.random((3, 1, 8, 8)) * 0.8
        assert mse(x, x + 0.1) == pytest.approx(0.01, abs=1e-12)

    def test_empty(self, mini_bundle):
        with pytest.raises(ContractError):
            reconstruction_mse(mini_bundle, np.zeros((0, 1, 8, 8)))


class TestEditing:
    def test_untrained_bundle(self, mini_arch):
        with pytest.raises(StateError):
            edit_attribute(NetworkBundle(mini_arch), torch.zeros(1, 1, 8, 8), 1)

    def test_output_range_and_shape(self, mini_bundle, rng):
        out = edit_attribute(mini_bundle, torch.from_numpy(rng.random((4, 1, 8, 8))), 1)
        assert out.shape == (4, 1, 8, 8)
        assert ((out > 0) & (out < 1)).all()

    def test_bad_target(self, mini_bundle):
        with pytest.raises(ContractError):
            edit_attribute(mini_bundle, torch.zeros(1, 1, 8, 8, dtype=torch.float64), 2)

    def test_constant_oracle_rates(self, mini_bundle, rng):
        x = torch.from_numpy(rng.random((5, 1, 8, 8)))
        assert edit_success_rates(mini_bundle, x, ConstantOracle(1.0)) == (0.0, 1.0)
        assert edit_success_rates(mini_bundle, x, ConstantOracle(0.0)) == (1.0, 0.0)

    def test_attribute_independent_decoder_sums_to_one(self, mini_bundle, rng, monkeypatch):
        # wire the decoder's attribute input to a constant: both edits become identical images
        orig = mini_bundle.theta.forward
        monkeypatch.setattr(mini_bundle.theta, "forward", lambda z, y: orig(z, torch.full_like(y, 0.5)))
        x = torch.from_numpy(rng.random((40, 1, 8, 8)))
        oracle = lambda imgs: (imgs.mean(dim=(1, 2, 3)) > imgs.mean()).to(imgs.dtype)  # noqa: E731
        oracle = _callable_oracle(oracle)
        c0, c1 = edit_success_rates(mini_bundle, x, oracle)
        assert c0 + c1 == 1.0

    def test_empty_sources(self, mini_bundle):
        with pytest.raises(ContractError):
            edit_success_rates(mini_bundle, np.zeros((0, 1, 8, 8)), ConstantOracle(1.0))


def _callable_oracle(fn):
    class Wrapped(torch.nn.Module):
        trained = True

        def __init__(self):
            super().__init__()
            self.dummy = torch.nn.Parameter(torch.zeros((), dtype=torch.float64))

        def forward(self, x):
            return fn(x)

    return Wrapped()


class TestPixelOracle:
    def test_labels_real_renders(self, small_dataset):
        labels = oracle_classify(PixelRuleOracle(), small_dataset.images, small_dataset.factors)
        assert np.array_equal(labels, small_dataset.labels)

    def test_labels_counterfactual_renders(self, small_dataset):
        f = small_dataset.factors[:10]
        flipped = np.stack([render_sprite(f[i], 1 - int(small_dataset.labels[i])) for i in range(10)])
        labels = oracle_classify(PixelRuleOracle(), flipped, f)
        assert np.array_equal(labels, 1 - small_dataset.labels[:10])


class TestGrid:
    def test_dimensions(self, tmp_path, rng):
        rows = [rng.random((8, 3, 32, 32)).astype(np.float32) for _ in range(3)]
        path = render_grid(rows, tmp_path / "g.png")
        img = Image.open(path)
        assert img.size == (8 * 32 + 7 * 2, 3 * 32 + 2 * 2)
        assert img.mode == "RGB"

    def test_single_tile_exact(self, tmp_path, rng):
        tile = np.round(rng.random((1, 1, 8, 8)) * 255) / 255
        path = render_grid([tile], tmp_path / "one.png")
        back = np.asarray(Image.open(path), dtype=np.float64) / 255
        assert np.array_equal(back, tile[0, 0])

    def test_roundtrip(self, tmp_path, rng):
        rows = [np.round(rng.random((4, 3, 8, 8)) * 255) / 255 for _ in range(2)]
        path = render_grid(rows, tmp_path / "rt.png")
        back = read_grid(path, 2, 4, 8)
        for i in range(2):
            np.testing.assert_allclose(back[i], rows[i], atol=1e-6)

    def test_unequal_rows(self, tmp_path, rng):
        with pytest.raises(ContractError):
            render_grid([rng.random((2, 1, 8, 8)), rng.random((3, 1, 8, 8))], tmp_path / "bad.png")

    def test_write_failure(self, tmp_path, rng):
        with pytest.raises(OSError):
            render_grid([rng.random((1, 1, 8, 8))], tmp_path / "missing" / "x.png")


class TestMetricsReport:
    def test_rate_range(self):
        with pytest.raises(ContractError):
            MetricsReport(mse=0.1, c_attr0=1.5, c_attr1=0.0, enc_cls_acc=0.5, aux_probe_acc=0.5, n_eval=1)

    def test_negative_mse(self):
        with pytest.raises(ContractError):
            MetricsReport(mse=-0.1, c_attr0=0.0, c_attr1=0.0, enc_cls_acc=0.5, aux_probe_acc=0.5, n_eval=1)


class TestAblation:
    MINI = dict(d_z=4, width=2, aux_hidden=4, batch_size=8)

    def test_trivial_grid(self, mini_dataset):
        grid = [ExperimentConfig(epochs=0, name="untrained", **self.MINI)]
        oracle = PixelRuleOracle()
        rows = run_ablation(mini_dataset, grid, oracle, seeds=(0,))
        assert len(rows) == 1 and not rows[0].failed
        m = rows[0].mean()
        assert 0.0 <= m.c_attr0 <= 1.0 and 0.0 <= m.aux_probe_acc <= 1.0
        assert m.n_eval == 10
        text = format_table(rows)
        assert "untrained" in text and "MSE" in text

    def test_failed_row_continues(self, mini_dataset):
        grid = [ExperimentConfig(epochs=0, name="bad", **self.MINI), ExperimentConfig(epochs=0, name="ok", **self.MINI)]

        def trainer(d, cfg, out):
            if cfg.name == "bad":
                raise StateError("boom")
            return NetworkBundle(cfg.arch(8, 1), seed=cfg.seed)

        rows = run_ablation(mini_dataset, grid, PixelRuleOracle(), seeds=(0,), trainer=trainer)
        assert rows[0].failed and not rows[1].failed
        assert "failed" in format_table(rows)
        assert "StateError" in table_csv(rows)

    def test_deterministic_tables(self, mini_dataset):
        grid = [ExperimentConfig(epochs=1, name="one", learning_rate=1e-3, **self.MINI)]
        a = table_csv(run_ablation(mini_dataset, grid, PixelRuleOracle(), seeds=(0, 1)))
        b = table_csv(run_ablation(mini_dataset, grid, PixelRuleOracle(), seeds=(0, 1)))
        assert a == b
        assert len(a.splitlines()) == 1 + 2 + 1

    def test_row_mean(self):
        reps = [MetricsReport(0.1, 0.2, 0.4, 0.9, 0.5, 10), MetricsReport(0.3, 0.4, 0.6, 1.0, 0.7, 10)]
        m = AblationRow("r", ExperimentConfig(), reps, [0, 1]).mean()
        assert m.mse == pytest.approx(0.2) and m.c_attr1 == pytest.approx(0.5) and m.n_eval == 10
