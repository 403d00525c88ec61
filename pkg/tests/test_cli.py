from __future__ import annotations

import csv

import numpy as np
import pytest

from src.cli import main, run_lock
from src.errors import TrainingError
from src.images import read_image
from src.pipeline import DatasetManifest


def test_gen_synth_writes_covers(tmp_path):
    assert main(["gen-synth", "--n", "3", "--size", "32", "--seed", "1", "--out", str(tmp_path)]) == 0
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["cover_00000.pgm", "cover_00001.pgm", "cover_00002.pgm"]
    assert read_image(tmp_path / "cover_00000.pgm").shape == (32, 32)


def test_gen_synth_rejects_empty_corpus(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["gen-synth", "--n", "0", "--out", str(tmp_path)])
    assert exc.value.code == 2


def test_embed_zero_payload_is_byte_identical(tmp_path):
    covers = tmp_path / "covers"
    main(["gen-synth", "--n", "20", "--size", "32", "--seed", "2", "--out", str(covers)])
    out = tmp_path / "stego0"
    assert main(["embed", "--cover-dir", str(covers), "--payload", "0", "--seed", "5",
                 "--no-dn-split", "--out", str(out)]) == 0
    for cover in covers.iterdir():
        assert (out / "stego" / cover.name).read_bytes() == cover.read_bytes()
    manifest = DatasetManifest.read(out / "manifest.csv")
    assert manifest.counts()["test"] == 10
    assert manifest.metadata["payload_bpp"] == 0.0


def test_embed_writes_noise_and_secondary(tmp_path):
    covers, extra = tmp_path / "covers", tmp_path / "extra"
    main(["gen-synth", "--n", "40", "--size", "32", "--seed", "3", "--out", str(covers)])
    main(["gen-synth", "--n", "10", "--size", "32", "--seed", "4", "--out", str(extra)])
    out = tmp_path / "run"
    assert main(["embed", "--cover-dir", str(covers), "--secondary-dir", str(extra), "--payload", "0.4",
                 "--noise-out", str(tmp_path / "noise"), "--noise-format", "txt", "--out", str(out)]) == 0
    manifest = DatasetManifest.read(out / "manifest.csv")
    assert len(manifest.entries) == 50
    assert {e.source for e in manifest.entries} == {"primary", "secondary"}
    assert (out / "secondary" / "stego" / "cover_00000.pgm").exists()
    noise = np.loadtxt(tmp_path / "noise" / "cover_00000.txt")
    assert set(np.unique(noise)) <= {-1.0, 0.0, 1.0}


def test_embed_unknown_cost_model_is_a_usage_error(tmp_path):
    with pytest.raises(SystemExit):
        main(["embed", "--cover-dir", str(tmp_path), "--model", "jpeg", "--payload", "0.4", "--out", str(tmp_path)])


def test_placeholder_cost_model_fails_cleanly(tmp_path):
    covers = tmp_path / "covers"
    main(["gen-synth", "--n", "2", "--size", "32", "--out", str(covers)])
    assert main(["embed", "--cover-dir", str(covers), "--model", "wow", "--payload", "0.4",
                 "--out", str(tmp_path / "out")]) == 1


def test_train_requires_manifest(tmp_path):
    assert main(["train", "--run-dir", str(tmp_path / "run")]) == 1


def test_bad_config_file_reports_failure(tmp_path):
    config = tmp_path / "exp.toml"
    config.write_text("[model]\ndepth = 'six'\n", encoding="utf-8")
    assert main(["train", "--config", str(config), "--manifest", "m.csv", "--run-dir", str(tmp_path / "run")]) == 1


def test_eval_missing_checkpoint(tmp_path, tiny_corpus):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--manifest", str(tiny_corpus)]) == 1


def test_run_lock_is_exclusive(tmp_path):
    with run_lock(tmp_path):
        with pytest.raises(TrainingError):
            with run_lock(tmp_path):
                pass
    assert not (tmp_path / "run.lock").exists()


def test_empty_ablation_grid(tmp_path, tiny_corpus):
    grid = tmp_path / "grid.toml"
    grid.write_text("[grid]\n", encoding="utf-8")
    assert main(["ablate", "--grid", str(grid), "--manifest", str(tiny_corpus), "--out", str(tmp_path / "abl")]) == 1


def _write_experiment(path, **schedule):
    lines = ["[model]", "input_size = 32", "branch_width = 4", "head_channels = 16", "depth = 3", "", "[schedule]"]
    lines += [f"{k} = {v}" for k, v in schedule.items()]
    lines += ["", "[dn_schedule]", "epochs = 1", "pairs_per_batch = 4"]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


@pytest.mark.slow
def test_train_then_eval(tmp_path, tiny_corpus, capsys):
    config = _write_experiment(tmp_path / "exp.toml", epochs=1, pairs_per_batch=4, decay_every=1)
    run = tmp_path / "run"
    assert main(["train", "--config", str(config), "--manifest", str(tiny_corpus), "--run-dir", str(run)]) == 0
    for name in ("config.toml", "manifest.csv", "logs/run.log", "logs/metrics.csv",
                 "checkpoints/dn_best.ckpt", "checkpoints/best.ckpt", "reports/report.csv"):
        assert (run / name).exists(), name
    assert not (run / "run.lock").exists()
    assert "P_E" in capsys.readouterr().out

    assert main(["eval", "--checkpoint", str(run / "checkpoints" / "best.ckpt"), "--manifest", str(tiny_corpus),
                 "--out", str(tmp_path / "eval")]) == 0
    with (tmp_path / "eval" / "report.csv").open(newline="") as f:
        rows = {r["metric"]: float(r["value"]) for r in csv.DictReader(f)}
    assert 0.0 <= rows["P_E"] <= 0.5


@pytest.mark.slow
def test_ablation_grid(tmp_path, tiny_corpus):
    grid = tmp_path / "grid.toml"
    grid.write_text(
        "[base.model]\ninput_size = 32\nbranch_width = 4\nheight = 0\n", encoding="utf-8"
    )
    assert main(["ablate", "--grid", str(grid), "--manifest", str(tiny_corpus), "--out", str(tmp_path / "bad")]) == 1

    grid.write_text(
        "[base.model]\ninput_size = 32\nbranch_width = 4\nhead_channels = 16\nend_to_end = true\n\n"
        "[base.schedule]\nepochs = 1\npairs_per_batch = 4\ndecay_every = 1\n\n"
        "[grid]\nmodel.depth = [2, 6]\nsplit_seeds = [0, 1]\n",
        encoding="utf-8",
    )
    out = tmp_path / "abl"
    assert main(["ablate", "--grid", str(grid), "--manifest", str(tiny_corpus), "--out", str(out)]) == 0
    with (out / "ablation.csv").open(newline="") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 4
    assert {r["model.depth"] for r in rows} == {"2", "6"}
    with (out / "ablation_summary.csv").open(newline="") as f:
        summary = list(csv.DictReader(f))
    assert [int(r["runs"]) for r in summary] == [2, 2]


@pytest.fixture(scope="module")
def desk_corpus(tmp_path_factory):
    """256 synthetic 64x64 covers embedded at 0.5 bpp through the command line."""
    root = tmp_path_factory.mktemp("desk")
    assert main(["gen-synth", "--n", "256", "--size", "64", "--seed", "7", "--out", str(root / "covers")]) == 0
    assert main(["embed", "--cover-dir", str(root / "covers"), "--payload", "0.5", "--seed", "7",
                 "--out", str(root / "data")]) == 0
    return root / "data" / "manifest.csv"


def _ablate(tmp_path, manifest, axis: str) -> dict[str, float]:
    grid = tmp_path / "grid.toml"
    grid.write_text(
        "[base.model]\nend_to_end = false\n\n"
        "[base.schedule]\nepochs = 200\ndecay_every = 100\nmax_steps = 2000\n\n"
        f"[grid]\n{axis}\n",
        encoding="utf-8",
    )
    out = tmp_path / "abl"
    assert main(["ablate", "--grid", str(grid), "--manifest", str(manifest), "--out", str(out)]) == 0
    with (out / "ablation.csv").open(newline="") as f:
        rows = list(csv.DictReader(f))
    column = axis.split(" = ")[0]
    return {r[column]: float(r["P_E"]) for r in rows}


@pytest.mark.slow
def test_shallow_model_is_a_weaker_detector(tmp_path, desk_corpus):
    pe = _ablate(tmp_path, desk_corpus, 'model.depth = [2, 6]\nmodel.preprocessing = ["none"]')
    assert pe.keys() == {"2", "6"}
    assert pe["2"] > pe["6"]


@pytest.mark.slow
def test_learned_denoiser_is_no_worse_than_raw_pixels(tmp_path, desk_corpus):
    pe = _ablate(tmp_path, desk_corpus, 'model.preprocessing = ["none", "learned_dn"]')
    assert pe["learned_dn"] <= pe["none"]
