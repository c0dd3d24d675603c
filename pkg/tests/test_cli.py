import csv
import json

import pytest

from capcritic.cli import main

SMALL = {"embed_dim": 6, "hidden_size": 5, "mlp_hidden": 6, "cbp_dim": 16, "batch_size": 8, "epochs": 1}


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert main(["--seed", "2", "--out-dir", str(root), "synth-data", "--n-images", "16"]) == 0
    (root / "small.json").write_text(json.dumps(SMALL))
    return root


def paths(root, *names):
    out = []
    for n in names:
        out += [f"--{n}", str(root / {"captions": "captions.json", "features": "features.cfv",
                                      "vocab": "vocab.txt", "model": "model.crt"}[n])]
    return out


@pytest.fixture(scope="module")
def model(data):
    argv = ["--config", str(data / "small.json"), "--out-dir", str(data), "train",
            *paths(data, "captions", "features", "vocab")]
    assert main(argv) == 0
    return data / "model.crt"


def test_synth_data_writes_files(data):
    for name in ("captions.json", "features.cfv", "vocab.txt"):
        assert (data / name).is_file()


def test_refuses_to_overwrite_without_force(data, capsys):
    assert main(["--out-dir", str(data), "synth-data", "--n-images", "16"]) == 2
    assert "--force" in capsys.readouterr().err


def test_build_vocab_is_deterministic(tmp_path, data):
    argv = lambda out: ["--out-dir", str(tmp_path), "build-vocab", "--captions", str(data / "captions.json"),
                        "--min-freq", "1", "--max-vocab", "20", "--out", out]
    assert main(argv("a.txt")) == 0 and main(argv("b.txt")) == 0
    a = (tmp_path / "a.txt").read_bytes()
    assert a == (tmp_path / "b.txt").read_bytes()
    assert len(a.decode().splitlines()) <= 22


def test_build_vocab_from_text_lines(tmp_path):
    (tmp_path / "c.txt").write_text("a cat\na dog\n\na cat sits\n")
    assert main(["--out-dir", str(tmp_path), "build-vocab", "--captions", str(tmp_path / "c.txt"),
                 "--min-freq", "2"]) == 0
    assert (tmp_path / "vocab.txt").read_text().splitlines() == ["a", "cat", "<pad>", "<unk>"]


def test_missing_input_exits_2_with_path(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert main(["--out-dir", str(tmp_path), "build-vocab", "--captions", str(missing)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_unknown_config_key_exits_2(tmp_path, data):
    (tmp_path / "bad.json").write_text(json.dumps({"learning_rat": 0.1}))
    assert main(["--config", str(tmp_path / "bad.json"), "--out-dir", str(tmp_path), "train",
                 *paths(data, "captions", "features", "vocab")]) == 2
    (tmp_path / "typed.json").write_text(json.dumps({"replicas": "two"}))
    assert main(["--config", str(tmp_path / "typed.json"), "--out-dir", str(tmp_path), "synth-data"]) == 2


def test_usage_errors_exit_2(tmp_path):
    assert main([]) == 2
    assert main(["no-such-command"]) == 2
    assert main(["--threads", "0", "--out-dir", str(tmp_path), "synth-data"]) == 2


def test_train_is_deterministic(tmp_path, data, model):
    argv = ["--config", str(data / "small.json"), "--out-dir", str(tmp_path), "train",
            *paths(data, "captions", "features", "vocab")]
    assert main(argv) == 0
    assert (tmp_path / "model.crt").read_bytes() == model.read_bytes()
    assert (tmp_path / "history.csv").read_text().startswith("epoch,mean_loss")


def test_score_writes_per_pair_csv(tmp_path, data, model, capsys):
    assert main(["--out-dir", str(tmp_path), "score", *paths(data, "captions", "features", "vocab", "model"),
                 "--generator", "synth"]) == 0
    mean = float(capsys.readouterr().out.strip())
    rows = list(csv.DictReader(open(tmp_path / "scores.csv")))
    assert list(rows[0]) == ["image_id", "caption", "score"]
    assert len(rows) == 16 * 5
    assert mean == pytest.approx(sum(float(r["score"]) for r in rows) / len(rows))


def test_score_with_mismatched_vocab_exits_3(tmp_path, data, model):
    vocab = (data / "vocab.txt").read_text().splitlines()
    vocab[0], vocab[1] = vocab[1], vocab[0]
    (tmp_path / "swapped.txt").write_text("\n".join(vocab) + "\n")
    argv = ["--out-dir", str(tmp_path), "score", *paths(data, "captions", "features", "model"),
            "--vocab", str(tmp_path / "swapped.txt")]
    assert main(argv) == 3


def test_evaluate_generator_prints_scalar_and_csv(tmp_path, data, capsys):
    assert main(["--config", str(data / "small.json"), "--seed", "1", "--out-dir", str(tmp_path),
                 "evaluate-generator", *paths(data, "captions", "features", "vocab"), "--generator", "synth"]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert len(out) == 1 and 0 < float(out[0]) < 1
    rows = list(csv.DictReader(open(tmp_path / "evaluation_synth.csv")))
    assert len(rows) == 80


def test_evaluate_generator_unknown_generator_exits_3(tmp_path, data):
    assert main(["--config", str(data / "small.json"), "--out-dir", str(tmp_path), "evaluate-generator",
                 *paths(data, "captions", "features", "vocab"), "--generator", "other"]) == 3


def test_robustness_table_shape(tmp_path, data, model, capsys):
    assert main(["--out-dir", str(tmp_path), "robustness", *paths(data, "captions", "features", "vocab", "model"),
                 "--metrics", "bleu4,rougeL,cider,critic"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].split("\t") == ["metric", "RC", "WP", "RW"]
    assert [l.split("\t")[0] for l in lines[1:]] == ["bleu4", "rougeL", "cider", "critic"]
    rows = list(csv.reader(open(tmp_path / "robustness.csv")))
    assert sum(r[2] == "AUC" for r in rows) == 12


def test_baseline_and_word_freq(tmp_path, data, capsys):
    assert main(["--out-dir", str(tmp_path), "baseline", *paths(data, "captions", "features", "vocab"),
                 "--metric", "bleu1", "--generator", "synth"]) == 0
    assert (tmp_path / "bleu1.csv").is_file()
    assert main(["--out-dir", str(tmp_path), "word-freq", *paths(data, "captions", "features", "vocab")]) == 0
    assert "total_variation=" in capsys.readouterr().out
    assert main(["--out-dir", str(tmp_path), "--force", "baseline", *paths(data, "captions", "features", "vocab"),
                 "--metric", "meteor"]) == 2


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def test_correlate_kendall_three_rows(tmp_path, capsys):
    write_csv(tmp_path / "s.csv", ["unit_id", "human_score", "metric_score"], [[1, 1, 2], [2, 2, 1], [3, 3, 3]])
    assert main(["--out-dir", str(tmp_path), "correlate", "--scores", str(tmp_path / "s.csv")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["coefficient"] == pytest.approx(1 / 3) and report["n"] == 3
    assert json.loads((tmp_path / "correlation.json").read_text()) == report


def test_correlate_system_level_pearson(tmp_path, capsys):
    write_csv(tmp_path / "m.csv", ["system", "metric"], [["a", 1], ["b", 3], ["c", 2]])
    write_csv(tmp_path / "h.csv", ["system", "human_M1"], [["a", 1], ["b", 2], ["c", 3]])
    assert main(["--out-dir", str(tmp_path), "correlate", "--scores", str(tmp_path / "m.csv"),
                 "--human", str(tmp_path / "h.csv"), "--method", "pearson"]) == 0
    assert json.loads(capsys.readouterr().out)["coefficient"] == pytest.approx(0.5)


def test_correlate_constant_column_exits_3(tmp_path, capsys):
    write_csv(tmp_path / "s.csv", ["unit_id", "human_score", "metric_score"], [[1, 1, 5], [2, 2, 5], [3, 3, 5]])
    assert main(["--out-dir", str(tmp_path), "correlate", "--scores", str(tmp_path / "s.csv"),
                 "--method", "pearson"]) == 3
    write_csv(tmp_path / "x.csv", ["foo"], [[1]])
    assert main(["--out-dir", str(tmp_path), "--force", "correlate", "--scores", str(tmp_path / "x.csv")]) == 3
