import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from factorkit.config import TABLE1, TABLE3, ExperimentConfig, read_config, write_config
from factorkit.errors import ConfigurationError
from factorkit.losses import Weights


class TestValidation:
    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(alpha=-0.1),
            dict(rho=float("nan")),
            dict(delta=float("inf")),
            dict(mode="vae"),
            dict(momentum=1.0),
            dict(learning_rate=-1e-3),
            dict(batch_size=0),
            dict(aux_steps=0),
            dict(kl_reduction="max"),
        ],
    )
    def test_rejects(self, kwargs):
        with pytest.raises(ConfigurationError):
            ExperimentConfig(**kwargs)

    def test_presets_accepted(self):
        for preset in (TABLE1, TABLE3):
            cfg = ExperimentConfig(**preset)
            w = Weights.from_config(cfg)
            assert (w.alpha, w.beta, w.rho, w.delta_dec) == (preset["alpha"], preset["beta"], preset["rho"], preset["delta"])

    def test_hash_ignores_name(self):
        assert ExperimentConfig(name="a").hash() == ExperimentConfig(name="b").hash()
        assert ExperimentConfig().hash() != ExperimentConfig(alpha=0.1).hash()

    def test_warmup(self):
        cfg = ExperimentConfig(alpha=0.2, kl_warmup=4)
        assert [cfg.alpha_at(e) for e in range(5)] == pytest.approx([0.05, 0.1, 0.15, 0.2, 0.2])


class TestFile:
    def test_rows_inherit_base(self, tmp_path):
        path = tmp_path / "grid.cfg"
        path.write_text(
            "[experiment]\nalpha = 0.005\nepochs = 3\n\n"
            "[ablation.row1]\nname = full\n\n"
            "[ablation.row2]\nname = naive\nmode = naive\n\n"
            "[ablation.row10]\nuse_class_rec = false\n"
        )
        base, rows = read_config(path)
        assert base.epochs == 3
        assert [r.name for r in rows] == ["full", "naive", "row10"]
        assert rows[1].mode == "naive" and rows[1].epochs == 3
        assert rows[2].use_class_rec is False

    @pytest.mark.parametrize(
        "text",
        ["[experiment]\nfoo = 1\n", "[experiment]\nepochs = many\n", "[training]\nepochs = 1\n", "not an ini"],
    )
    def test_bad_files(self, tmp_path, text):
        path = tmp_path / "bad.cfg"
        path.write_text(text)
        with pytest.raises(ConfigurationError):
            read_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError):
            read_config(tmp_path / "absent.cfg")

    @settings(max_examples=25, deadline=None)
    @given(
        st.floats(0, 1, allow_nan=False),
        st.floats(0, 1, allow_nan=False),
        st.sampled_from(["ifcvae", "naive"]),
        st.integers(0, 50),
        st.booleans(),
    )
    def test_roundtrip(self, tmp_path_factory, alpha, delta, mode, epochs, flag):
        base = ExperimentConfig(alpha=alpha, delta=delta, epochs=epochs)
        rows = [base.replace(mode=mode, use_class_rec=flag, name="r1"), base.replace(rho=0.7, name="r2")]
        path = write_config(tmp_path_factory.mktemp("cfg") / "x.cfg", base, rows)
        base2, rows2 = read_config(path)
        assert base2 == base
        assert rows2 == rows and [r.name for r in rows2] == ["r1", "r2"]


class TestShippedConfigs:
    def test_table1_grid(self):
        from pathlib import Path

        root = Path(__file__).resolve().parents[1] / "configs"
        base, rows = read_config(root / "table1.cfg")
        assert len(rows) == 4
        modes = sorted((r.mode, r.beta > 0) for r in rows)
        assert modes == [("ifcvae", False), ("ifcvae", True), ("naive", False), ("naive", True)]
        base3, rows3 = read_config(root / "table3.cfg")
        assert any(r.alpha == 0.1 for r in rows3)
        for k, v in TABLE3.items():
            assert getattr(base3, k) == v
