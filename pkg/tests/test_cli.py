import csv

import numpy as np
import pytest

from nh2st.cli import PRESETS, build_parser, main, parse_grid, UsageError
from nh2st.data import load_dataset
from nh2st.model import predict
from nh2st.numerics import load_checkpoint
from nh2st.config import TrainConfig

SMALL = ["--N", "16", "--T", "4", "--K", "4", "--epochs", "2", "--lr", "0.003"]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, run = root / "data", root / "run"
    assert main(["synth", "--out", str(data), "--grid", "8", "--genes", "8", "--patch-dim", "16", "--seed", "3"]) == 0
    assert main(["train", "--data", str(data), "--out", str(run), *SMALL]) == 0
    return data, run


def test_train_outputs(trained):
    _, run = trained
    rows = read_csv(run / "train_report.csv")
    assert rows[0] == ["epoch", "total", "ls", "ln", "mse", "lr"] and len(rows) == 3
    cfg = TrainConfig.from_toml(run / "config.toml")
    assert (cfg.N, cfg.P, cfg.n, cfg.epochs) == (16, 16, 8, 2)
    assert load_checkpoint(run / "model.ckpt")["enc.phi_p.W1"].shape == (16, 32)


def test_config_file_then_flags(trained, tmp_path):
    data, _ = trained
    conf = tmp_path / "c.toml"
    conf.write_text("N = 32\nT = 4\nK = 4\nepochs = 1\nseed = 9\n")
    assert main(["train", "--data", str(data), "--config", str(conf), "--epochs", "3", "--out", str(tmp_path / "r")]) == 0
    cfg = TrainConfig.from_toml(tmp_path / "r" / "config.toml")
    assert (cfg.N, cfg.epochs, cfg.seed) == (32, 3, 9)


def test_eval_report(trained, tmp_path):
    data, run = trained
    out = tmp_path / "eval.csv"
    assert main(["eval", "--data", str(data), "--ckpt", str(run), "--k", "3", "--out", str(out)]) == 0
    rows = read_csv(out)
    assert rows[0] == ["fold", "mse", "mae", "pcc"]
    assert [r[0] for r in rows[1:]] == ["0", "1", "2", "summary"]
    assert all("±" in cell for cell in rows[-1][1:])


def test_predict_and_heatmap_agree(trained, tmp_path):
    data, run = trained
    ds = load_dataset(data)
    assert main(["predict", "--data", str(data), "--ckpt", str(run), "--out", str(tmp_path / "p.csv")]) == 0
    assert main(["export-heatmap", "--data", str(data), "--ckpt", str(run), "--gene", "g3",
                 "--out", str(tmp_path / "h.csv")]) == 0
    pred_rows = read_csv(tmp_path / "p.csv")
    heat_rows = read_csv(tmp_path / "h.csv")
    assert pred_rows[0] == ["spot_id", *ds.gene_names]
    assert heat_rows[0] == ["x", "y", "pred", "label"] and len(heat_rows) == 65
    expected = predict(load_checkpoint(run / "model.ckpt"), TrainConfig.from_toml(run / "config.toml"), ds.patches)
    got = np.array([[float(v) for v in r[1:]] for r in pred_rows[1:]])
    assert np.array_equal(got, expected)
    assert [float(r[2]) for r in heat_rows[1:]] == expected[:, 3].tolist()
    assert [float(r[3]) for r in heat_rows[1:]] == ds.expr[:, 3].tolist()


def test_unknown_gene(trained, tmp_path, capsys):
    data, run = trained
    code = main(["export-heatmap", "--data", str(data), "--ckpt", str(run), "--gene", "nope", "--out", str(tmp_path / "h.csv")])
    err = capsys.readouterr().err
    assert code == 1 and err.count("\n") == 1 and "nope" in err


def test_missing_data(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "absent"), "--out", str(tmp_path / "o")]) == 1
    assert capsys.readouterr().err.startswith("error: ")


@pytest.mark.parametrize("argv", [["bogus"], ["train", "--nope"], ["synth"], ["train", "--data", "d", "--out", "o", "--N", "x"]])
def test_usage_errors(argv, capsys):
    assert main(argv) == 2
    err = capsys.readouterr().err
    assert err.startswith("error: usage: ") and err.count("\n") == 1


@pytest.mark.parametrize("command", ["synth", "train", "eval", "predict", "ablate", "export-heatmap"])
def test_help_lists_defaults(command, capsys):
    with pytest.raises(SystemExit) as exc:
        main([command, "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    assert "usage:" in text
    if command in ("train", "eval", "ablate"):
        assert "--batch-size" in text and "default: 8" in text and "default: 0.05" in text


def test_parser_defaults_match_config():
    args = build_parser().parse_args(["train", "--data", "d", "--out", "o"])
    assert all(getattr(args, f"cfg_{k}") is None for k in TrainConfig().to_dict())


class TestGrid:
    def test_aliases(self):
        axes = parse_grid(["B=4,8", "lambda=1:0.5,0:1", "tau=0.1"])
        assert axes[0] == (("batch_size",), [(4,), (8,)])
        assert axes[1] == (("lambda1", "lambda2"), [(1.0, 0.5), (0.0, 1.0)])
        assert axes[2] == (("tau_temp",), [(0.1,)])

    @pytest.mark.parametrize("token", ["K", "K=", "zz=1", "K=1.5", "lambda=1", "K=a"])
    def test_rejects(self, token):
        with pytest.raises(UsageError):
            parse_grid([token])

    def test_presets_expand(self):
        sizes = {name: np.prod([len(v) for _, v in parse_grid(tokens)]) for name, tokens in PRESETS.items()}
        assert sizes == {"neighbors": 16, "batch": 5, "weights": 5, "temperature": 5}


def test_ablate_rows(trained, tmp_path):
    data, _ = trained
    out = tmp_path / "a.csv"
    assert main(["ablate", "--data", str(data), "--grid", "K=3,4", "L=1,2", "--k", "2", "--out", str(out),
                 "--N", "16", "--T", "4", "--epochs", "1"]) == 0
    rows = read_csv(out)
    assert rows[0][:2] == ["K", "L"] and rows[0][2:] == [
        "mse_mean", "mse_std", "mae_mean", "mae_std", "pcc_mean", "pcc_std"]
    assert [r[:2] for r in rows[1:]] == [["3", "1"], ["3", "2"], ["4", "1"], ["4", "2"]]


def test_ablate_needs_axes(trained, tmp_path):
    data, _ = trained
    assert main(["ablate", "--data", str(data), "--out", str(tmp_path / "a.csv")]) == 2


def test_raw_dataset_is_normalized(tmp_path):
    from nh2st.data import STDataset, save_dataset

    rng = np.random.default_rng(0)
    coords = np.array([(x, y) for y in range(4) for x in range(4)], dtype=float)
    raw = STDataset([f"r{i}" for i in range(16)], coords, rng.standard_normal((16, 8)).astype(np.float32),
                    rng.integers(0, 20, (16, 6)).astype(float), [f"h{j}" for j in range(6)])
    save_dataset(raw, tmp_path / "raw")
    assert main(["train", "--data", str(tmp_path / "raw"), "--top-genes", "4", "--out", str(tmp_path / "r"),
                 "--N", "8", "--T", "2", "--K", "3", "--epochs", "1"]) == 0
    assert TrainConfig.from_toml(tmp_path / "r" / "config.toml").n == 4


def test_repeated_commands_are_bitwise_identical(tmp_path):
    def run(tag):
        root = tmp_path / tag
        main(["synth", "--out", str(root / "d"), "--grid", "6", "--genes", "4", "--patch-dim", "8", "--seed", "5"])
        main(["train", "--data", str(root / "d"), "--out", str(root / "m"), *SMALL])
        main(["eval", "--data", str(root / "d"), "--ckpt", str(root / "m"), "--k", "2", "--out", str(root / "e.csv")])
        main(["predict", "--data", str(root / "d"), "--ckpt", str(root / "m"), "--out", str(root / "p.csv")])
        return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}

    a, b = run("a"), run("b")
    assert len(a) == 10 and a == b
