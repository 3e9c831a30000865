import numpy as np
import pytest

from magsr import cli
from magsr.config import load_kv, parse_kv
from magsr.ingest import encode_frame, read_dataset, read_header

SMALL = ["--image-size", "16", "--set", "dipole_grid=16"]


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert cli.main(["gen", "--out", str(out), "--n", "12", *SMALL]) == 0
    return out / "dataset.smag"


def tiny_train(data, out, *extra):
    return cli.main(["train", "--data", str(data), "--out", str(out), "--epochs", "1", "--latent-dim", "4",
                     "--set", "model.channels=4,4,8,8", "--set", "model.embed_hidden=8", "--set", "model.groups=2",
                     "--quiet", *extra])


def test_gen_empty_rod_dataset(tmp_path):
    assert cli.main(["gen", "--shapes", "rod", "--n", "0", "--out", str(tmp_path)]) == 0
    assert read_dataset(tmp_path / "dataset.smag") == []
    assert read_header((tmp_path / "dataset.smag").read_bytes())[2] == 0
    manifest = load_kv(tmp_path / "manifest.txt")
    assert manifest["command"] == "gen" and manifest["seed"] == "0"


def test_gen_config_file(tmp_path):
    cfg = tmp_path / "skin.cfg"
    cfg.write_text("# desk skin\nimage_size = 12\ndipole_grid=12\nnoise_std=0\n")
    assert cli.main(["gen", "--n", "2", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    recs = read_dataset(tmp_path / "dataset.smag")
    assert len(recs) == 4 and recs[0].depth.shape == (12, 12)


def test_train_lr_zero_keeps_init(tmp_path, small_data):
    assert tiny_train(small_data, tmp_path, "--lr", "0") == 0
    assert (tmp_path / "init.smck").read_bytes() == (tmp_path / "model.smck").read_bytes()
    lines = (tmp_path / "loss_history.csv").read_text().splitlines()
    assert lines[0] == "epoch,nll,kl,total" and len(lines) == 2
    assert load_kv(tmp_path / "manifest.txt")["model.lr"] == "0.0"


def test_pipeline_eval_table(tmp_path, small_data):
    for name, extra in (("full", []), ("z", ["--zaxis-only"]), ("ak", ["--shapes", "allen_key"])):
        assert tiny_train(small_data, tmp_path / name, *extra) == 0
    args = ["eval", "--data", str(small_data), "--out", str(tmp_path / "eval"),
            "--model", str(tmp_path / "full/model.smck"), "--zaxis-model", str(tmp_path / "z/model.smck"),
            "--single-model", str(tmp_path / "ak/model.smck")]
    assert cli.main(args) == 0
    rows = (tmp_path / "eval/table.txt").read_text().splitlines()
    assert len(rows) == 6
    assert [r.split("  ")[0].strip() for r in rows[1:]] == [label for label, _ in cli.METHOD_ROWS]
    report = parse_kv((tmp_path / "eval/report.txt").read_text())
    assert float(report["bilinear.psnr_mean"]) > 0


def test_recon_writes_pgm_pairs(tmp_path, small_data):
    assert cli.main(["recon", "--data", str(small_data), "--method", "bicubic", "--out", str(tmp_path),
                     "--limit", "2"]) == 0
    gt = cli.read_pgm(tmp_path / "0000_gt.pgm")
    pair = cli.read_pgm(tmp_path / "0000_pair.pgm")
    assert gt.shape == (16, 16) and pair.shape == (16, 32)
    np.testing.assert_array_equal(pair[:, :16], gt)
    first_test = cli._load_split(small_data, "test", 0)[0]
    assert np.abs(gt - first_test.depth).max() <= 0.5 / 65535 + 1e-7


def test_pgm_roundtrip(tmp_path):
    img = np.random.default_rng(0).random((5, 7))
    cli.write_pgm(tmp_path / "x.pgm", img)
    assert np.abs(cli.read_pgm(tmp_path / "x.pgm") - img).max() <= 0.5 / 65535 + 1e-12


def test_recon_cvae_requires_model(tmp_path, small_data, capsys):
    assert cli.main(["recon", "--data", str(small_data), "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and "--model" in err[0]


def test_missing_file_is_one_line_error(tmp_path, capsys):
    assert cli.main(["train", "--data", str(tmp_path / "nope.smag"), "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and "nope.smag" in err[0]


def test_stream_decodes_with_garbage(tmp_path):
    rng = np.random.default_rng(0)
    readings = [rng.uniform(-500, 500, (4, 4, 3)).astype(np.float32) for _ in range(5)]
    blob = b"\x00\xaa" + b"".join(encode_frame(r, i) for i, r in enumerate(readings)) + b"\xaa\x55\x01"
    (tmp_path / "in.bin").write_bytes(blob)
    assert cli.main(["stream", "--input", str(tmp_path / "in.bin"), "--out", str(tmp_path), "--chunk", "7"]) == 0
    report = parse_kv((tmp_path / "stream_report.txt").read_text())
    assert report["frames"] == "5" and report["crc_errors"] == "0"
    rows = (tmp_path / "readings.csv").read_text().splitlines()
    assert len(rows) == 6
    assert np.array_equal(np.array(rows[3].split(",")[1:], dtype=np.float32), readings[2].ravel())


def test_stream_latency_report(tmp_path, small_data):
    tiny_train(small_data, tmp_path / "m")
    assert cli.main(["encode-stream", "--data", str(small_data), "--output", str(tmp_path / "s.bin")]) == 0
    assert cli.main(["stream", "--input", str(tmp_path / "s.bin"), "--out", str(tmp_path),
                     "--model", str(tmp_path / "m/model.smck"), "--max-recon", "5"]) == 0
    report = parse_kv((tmp_path / "stream_report.txt").read_text())
    assert report["frames"] == "24" and report["latency_n"] == "5"
    assert float(report["latency_ms_max"]) > 0


def test_pose_baseline_only(tmp_path):
    trials = tmp_path / "trials.txt"
    trials.write_text("rod_wide,0\nrod_wide,45,0,0,2.5\n")
    assert cli.main(["pose", "--trials", str(trials), "--out", str(tmp_path), "--tolerance-deg", "15"]) == 0
    rows = (tmp_path / "trials.csv").read_text().splitlines()
    assert len(rows) == 3 and all(",bilinear," in r for r in rows[1:])


def test_parse_trials_defaults():
    scenes = cli.parse_trials("rod,30\nrod_thin,-10,1,2,1.5  # comment\n\n")
    assert [(s.shape.name, s.theta, s.tx, s.ty, s.press_depth) for s in scenes] == [
        ("rod", 30.0, 0.0, 0.0, 2.0), ("rod_thin", -10.0, 1.0, 2.0, 1.5)]
    assert len(cli.parse_trials(cli.default_trials())) == 12
