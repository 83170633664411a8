import json

import numpy as np
import pytest

from idpl import plots
from idpl.cli import main
from idpl.synthdata import save_label_png

TINY = {"n_source": 8, "n_target": 8, "n_eval": 4, "pt_steps": 20, "steps_per_round": 5,
        "rounds": 1, "features": 8, "batch_size": 4, "log_every": 5}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return str(p)


def test_no_args_prints_usage(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_unknown_command_nonzero():
    assert main(["frobnicate"]) != 0


def test_missing_config_exit_1(tmp_path):
    assert main(["pretrain", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path)]) == 1


def test_bad_hyperparameter_exit_1(tmp_path, cfg_path):
    assert main(["split", "--config", cfg_path, "--out", str(tmp_path / "o"), "--beta", "1.5"]) == 1


def test_eval_writes_metrics(tmp_path, capsys):
    r = np.random.default_rng(0)
    (tmp_path / "pred").mkdir()
    (tmp_path / "truth").mkdir()
    for i in range(3):
        t = r.integers(0, 6, (8, 8)).astype(np.uint8)
        save_label_png(tmp_path / "truth" / f"{i}.png", t)
        save_label_png(tmp_path / "pred" / f"{i}.png", t)
    code = main(["eval", "--pred", str(tmp_path / "pred"), "--truth", str(tmp_path / "truth"),
                 "--out", str(tmp_path / "m")])
    assert code == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["miou"] == 1.0
    assert json.loads((tmp_path / "m" / "metrics.json").read_text()) == printed
    assert main(["eval", "--pred", str(tmp_path / "missing"), "--truth", str(tmp_path / "truth")]) == 1


def test_ablate_alpha_one_row_per_cell(tmp_path, cfg_path):
    out = tmp_path / "abl"
    assert main(["ablate", "--param", "alpha", "--values", "0,0.9", "--config", cfg_path,
                 "--out", str(out)]) == 0
    rows = plots.read_ablation_csv(out / "ablate_alpha.csv")
    assert [r["alpha"] for r in rows] == [0.0, 0.9]
    assert (out / "manifest.json").exists()


def test_surface_cells_equal_csv(tmp_path, cfg_path):
    out = tmp_path / "bl"
    assert main(["ablate", "--param", "beta_lambda", "--values", "0.3,0.6", "--config", cfg_path,
                 "--out", str(out)]) == 0
    rows = plots.read_ablation_csv(out / "ablate_beta_lambda.csv")
    _, Z = plots.plot_surface(rows, tmp_path / "s.png")
    for row in rows:
        i = [0.3, 0.6].index(row["lambda"])
        j = [0.3, 0.6].index(row["beta"])
        assert Z[i, j] == pytest.approx(row["miou"], abs=1e-12)


def test_idpl_then_plot(tmp_path, cfg_path):
    run = tmp_path / "run"
    assert main(["idpl", "--config", cfg_path, "--out", str(run), "--samples", "2"]) == 0
    for name in ("metrics.json", "rounds.json", "history.json", "manifest.json"):
        assert (run / name).exists()
    manifest = json.loads((run / "manifest.json").read_text())
    assert "metrics.json" in manifest["files"]
    assert main(["plot", str(run)]) == 0
    assert len(list((run / "plots").glob("*.png"))) == 4


def test_plot_empty_dir_exit_1(tmp_path):
    (tmp_path / "empty").mkdir()
    assert main(["plot", str(tmp_path / "empty")]) == 1


def test_palette_round_trip():
    for C in (6, 19, 25):
        pal = plots.palette(C)
        assert len({tuple(c) for c in pal}) == C
        labels = np.arange(C).reshape(1, C)
        rgb = plots.colorize(labels, C)
        assert np.array_equal(plots.decolorize(rgb, C), labels)
        assert np.array_equal(plots.colorize(plots.decolorize(rgb, C), C), rgb)


@pytest.mark.parametrize("command", ["pretrain", "idpl", "split", "pseudo"])
def test_same_seed_same_metric_bytes(tmp_path, cfg_path, command):
    outs = []
    for k in range(2):
        out = tmp_path / f"r{k}"
        assert main([command, "--config", cfg_path, "--out", str(out), "--seed", "3"]) == 0
        outs.append(out)
    jsons = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*.json"))
    assert jsons
    for rel in jsons:
        assert (outs[0] / rel).read_bytes() == (outs[1] / rel).read_bytes(), rel
