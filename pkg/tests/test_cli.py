import json
import time

import numpy as np
import pytest
from PIL import Image

from hiresvdd.cli import EXIT_ERROR, EXIT_OK, EXIT_PARTIAL, EXIT_USAGE, main
from hiresvdd.records import DatasetManifest, ManifestRow, ScoreEntry, ScoreSet


def _write_scores(path, entries):
    ScoreSet([ScoreEntry(*e) for e in entries]).write(path)
    return str(path)


def test_eval_perfect_separation_prints_zero(tmp_path, capsys):
    scores = _write_scores(tmp_path / "s.tsv", [("a", "bonafide", -2.0), ("b", "bonafide", -1.0),
                                                 ("c", "deepfake", 1.0), ("d", "deepfake", 3.0)])
    assert main(["eval", "--run-dir", str(tmp_path / "run"), "--bootstrap", "200", scores]) == EXIT_OK
    out = capsys.readouterr().out
    assert "0.00" in out
    assert (tmp_path / "run/reports/report.csv").read_text().splitlines()[1].startswith("s,0.0,")


def test_fuse_aggregate_of_two_score_files(tmp_path):
    a = _write_scores(tmp_path / "a.tsv", [("x", "deepfake", 2.0)])
    b = _write_scores(tmp_path / "b.tsv", [("x", "deepfake", 4.0)])
    run = tmp_path / "run"
    assert main(["fuse", "--run-dir", str(run), "--kind", "aggregate", "--scores", a, b]) == EXIT_OK
    fused = ScoreSet.read(run / "scores/fused_aggregate.tsv")
    assert fused.as_dict() == {"x": 3.0}
    prov = json.loads((run / "fuse.provenance.json").read_text())
    assert set(prov["inputs"]) == {a, b} and "scores/fused_aggregate.tsv" in prov["outputs"]


def test_config_file_and_flag_precedence(tmp_path):
    a = _write_scores(tmp_path / "a.tsv", [("x", "bonafide", 0.0), ("y", "deepfake", 1.0)])
    cfg = tmp_path / "eval.cfg"
    cfg.write_text(f"# comment\nbootstrap = 100\nseed = 5\nscores = {a}\n")
    run = tmp_path / "run"
    assert main(["eval", "--config", str(cfg), "--run-dir", str(run), "--seed", "9"]) == EXIT_OK
    snap = (run / "eval.config.txt").read_text()
    assert "bootstrap = 100" in snap and "seed = 9" in snap
    # the snapshot replays as a config file
    assert main(["eval", "--config", str(run / "eval.config.txt")]) == EXIT_OK


def test_usage_and_io_errors(tmp_path):
    run = str(tmp_path / "run")
    assert main(["score", "--run-dir", run]) == EXIT_USAGE
    assert main(["eval", "--run-dir", run, str(tmp_path / "missing.tsv")]) == EXIT_ERROR
    bad = tmp_path / "bad.cfg"
    bad.write_text("no_such_key = 1\n")
    assert main(["eval", "--config", str(bad)]) == EXIT_USAGE
    assert main(["train-expert", "--run-dir", run, "--manifest", "m.tsv", "--partition", "4", "--index", "4"]) \
        == EXIT_USAGE
    with pytest.raises(SystemExit):
        main(["train-expert", "--band", "banana"])


@pytest.mark.slow
def test_smoke_pipeline_under_budget(tmp_path):
    run = str(tmp_path / "run")
    t0 = time.process_time()
    assert main(["synth", "--run-dir", run, "--n-bonafide", "25", "--n-deepfake", "25", "--duration", "1"]) == EXIT_OK
    man = f"{run}/corpus/manifest.tsv"
    # 32 training clips at batch 16: 25 epochs is 50 steps
    assert main(["train-expert", "--run-dir", run, "--manifest", man, "--seconds", "1", "--epochs", "25",
                 "--name", "fb"]) == EXIT_OK
    assert main(["score", "--run-dir", run, "--checkpoint", f"{run}/checkpoints/fb.sbck", "--manifest", man,
                 "--split", "testA"]) == EXIT_OK
    assert main(["eval", "--run-dir", run, "--bootstrap", "200", f"{run}/scores/fb.tsv"]) == EXIT_OK
    assert time.process_time() - t0 < 300
    first = (tmp_path / "run/checkpoints/fb.sbck").read_bytes()
    # rerun from the snapshot reproduces the checkpoint byte for byte
    assert main(["train-expert", "--config", f"{run}/train-expert.config.txt"]) == EXIT_OK
    assert (tmp_path / "run/checkpoints/fb.sbck").read_bytes() == first


def test_tiny_full_pipeline(tmp_path):
    run = str(tmp_path / "run")
    assert main(["synth", "--run-dir", run, "--n-bonafide", "8", "--n-deepfake", "8", "--duration", "0.3"]) == EXIT_OK
    man = f"{run}/corpus/manifest.tsv"
    common = ["--run-dir", run, "--manifest", man, "--seconds", "0.3", "--window", "512", "--epochs", "1"]
    assert main(["train-expert", *common, "--name", "fb"]) == EXIT_OK
    assert main(["train-expert", *common, "--partition", "4", "--index", "2", "--name", "sb2"]) == EXIT_OK
    ckpt = f"{run}/checkpoints"
    pool = tmp_path / "pool.json"
    pool.write_text(json.dumps({"kind": "interaction", "members": [
        {"checkpoint": f"{ckpt}/fb.sbck", "band": [0.0, 22050.0]},
        {"checkpoint": f"{ckpt}/sb2.sbck", "band": [11025.0, 16537.5]}]}))
    assert main(["fuse", "--run-dir", run, "--kind", "interact", "--pool", str(pool), "--manifest", man,
                 "--epochs", "1"]) == EXIT_OK
    assert main(["distill", "--run-dir", run, "--manifest", man, "--teacher", f"{ckpt}/sb2.sbck",
                 "--epochs", "1"]) == EXIT_OK
    report = json.loads((tmp_path / "run/reports/student.distill.json").read_text())
    assert report["alpha"] == 0.5 and report["beta"] == 0.2
    assert main(["gradcam", "--run-dir", run, "--checkpoint", f"{ckpt}/student.sbck", "--manifest", man,
                 "--limit", "2"]) == EXIT_OK
    overlays = sorted((tmp_path / "run/overlays").glob("*.png"))
    assert len(overlays) == 2
    with Image.open(overlays[0]) as img:
        assert img.size[1] == 257
    csv_lines = (tmp_path / "run/reports/student.band_fractions.csv").read_text().splitlines()
    assert csv_lines[0] == "id,model,band_0,band_1,band_2,band_3"
    fracs = np.array([float(v) for v in csv_lines[1].split(",")[2:]])
    assert fracs.sum() == pytest.approx(1.0)
    first = overlays[0].read_bytes()
    assert main(["gradcam", "--config", f"{run}/gradcam.config.txt"]) == EXIT_OK
    assert overlays[0].read_bytes() == first


def test_unreadable_clip_gives_partial_exit(tmp_path):
    run = str(tmp_path / "run")
    assert main(["synth", "--run-dir", run, "--n-bonafide", "4", "--n-deepfake", "4", "--duration", "0.3"]) == EXIT_OK
    man_path = tmp_path / "run/corpus/manifest.tsv"
    common = ["--run-dir", run, "--manifest", str(man_path), "--seconds", "0.3", "--window", "512", "--epochs", "1"]
    assert main(["train-expert", *common, "--name", "fb"]) == EXIT_OK
    m = DatasetManifest.read(man_path)
    (tmp_path / "broken.wav").write_bytes(b"RIFF")
    rows = list(m.rows) + [ManifestRow("broken", str(tmp_path / "broken.wav"), "bonafide", "testA")]
    DatasetManifest(rows, m.root).write(man_path.parent / "with_broken.tsv")
    code = main(["score", "--run-dir", run, "--checkpoint", f"{run}/checkpoints/fb.sbck",
                 "--manifest", str(man_path.parent / "with_broken.tsv")])
    assert code == EXIT_PARTIAL
    prov = json.loads((tmp_path / "run/score.provenance.json").read_text())
    assert [s[0] for s in prov["skipped"]] == ["broken"]
