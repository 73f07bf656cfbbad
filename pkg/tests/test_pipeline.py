import json
import warnings
from pathlib import Path

import numpy as np
import pytest

from escgan import pipeline as P
from escgan import synth
from escgan.cli import main
from escgan.config import load_config

# methods x (ESC-10, ESC-50, UrbanSound8k, DCASE-2017) mean accuracies
REFERENCE_ACCURACIES = {
    "Proposed (DA)": [0.87, 0.77, 0.94, 0.76],
    "Proposed": [0.72, 0.55, 0.73, 0.66],
    "GoogLeNet (DA)": [0.86, 0.78, 0.93, 0.73],
    "GoogLeNet": [0.83, 0.71, 0.91, 0.64],
    "AlexNet (DA)": [0.85, 0.75, 0.93, 0.74],
    "AlexNet": [0.83, 0.64, 0.90, 0.62],
}
URBAN_CLASSES = ["AI", "CA", "CH", "DO", "DR", "EN", "GU", "JA", "SI", "SM"]
URBAN_ROW_AI = [0.68, 0.00, 0.02, 0.01, 0.05, 0.14, 0.01, 0.04, 0.02, 0.03]


def write_manifest(tmp_path, rows, header="path,label,fold", touch=True):
    for r in rows:
        if touch:
            (tmp_path / r[0]).write_bytes(b"")
    text = header + "\n" + "".join(",".join(str(c) for c in r) + "\n" for r in rows)
    (tmp_path / "m.csv").write_text(text)
    return tmp_path / "m.csv"


class TestManifest:
    def test_three_rows(self, tmp_path):
        m = P.load_manifest(write_manifest(tmp_path, [("a.wav", "dog", 1), ("b.wav", "cat", 2), ("c.wav", "dog", 5)]))
        assert len(m) == 3
        assert m.classes == ("cat", "dog")
        assert m.class_counts() == {"cat": 1, "dog": 2}

    @pytest.mark.parametrize("fold", ["6", "0", "x"])
    def test_bad_fold_reports_line(self, tmp_path, fold):
        path = write_manifest(tmp_path, [("a.wav", "dog", 1), ("b.wav", "dog", fold)])
        with pytest.raises(P.ManifestError, match=r"m\.csv:3"):
            P.load_manifest(path)

    def test_unknown_label(self, tmp_path):
        path = write_manifest(tmp_path, [("a.wav", "dog", 1), ("b.wav", "cow", 1)])
        with pytest.raises(P.ManifestError, match=r":3: unknown label"):
            P.load_manifest(path, classes=["dog", "cat"])

    def test_duplicate_path(self, tmp_path):
        path = write_manifest(tmp_path, [("a.wav", "dog", 1), ("./a.wav", "dog", 2)])
        with pytest.raises(P.ManifestError, match="duplicate"):
            P.load_manifest(path)

    def test_missing_file(self, tmp_path):
        (tmp_path / "m.csv").write_text("path,label,fold\nnope.wav,dog,1\n")
        with pytest.raises(P.ManifestError, match=r":2: missing file"):
            P.load_manifest(tmp_path / "m.csv")

    def test_bad_header(self, tmp_path):
        path = write_manifest(tmp_path, [("a.wav", "dog", 1)], header="file,class,fold")
        with pytest.raises(P.ManifestError, match=":1:"):
            P.load_manifest(path)

    def test_split_column(self, tmp_path):
        path = write_manifest(tmp_path, [("a.wav", "dog", 1, "original")], header="path,label,fold,split")
        assert P.load_manifest(path).entries[0].split == "original"

    def test_urbansound_sized_manifest(self, tmp_path):
        (tmp_path / "audio").mkdir()
        rows = [(f"audio/{i}.wav", URBAN_CLASSES[i % 10], i % 5 + 1) for i in range(8732)]
        m = P.load_manifest(write_manifest(tmp_path, rows))
        assert len(m) == 8732
        counts = m.class_counts()
        assert sum(counts.values()) == 8732
        assert counts["AI"] == 874 and counts["SM"] == 873


class TestConfusion:
    def test_perfect(self):
        cm = P.confusion(["a", "b", "c"], ["a", "b", "c"], ["a", "b", "c"])
        np.testing.assert_array_equal(cm.rates, np.eye(3))

    def test_always_wrong_row(self):
        cm = P.confusion(["b", "b"], ["a", "a"], ["a", "b"])
        np.testing.assert_array_equal(cm.rates, [[0, 1], [0, 0]])
        assert cm.n == 2

    def test_row_convention_and_rendering(self):
        # 100 AI samples predicted with the reference row's rates
        preds = [c for c, r in zip(URBAN_CLASSES, URBAN_ROW_AI) for _ in range(int(round(r * 100)))]
        cm = P.confusion(preds, ["AI"] * len(preds), URBAN_CLASSES)
        np.testing.assert_allclose(cm.rates[0], URBAN_ROW_AI)
        row = cm.render().splitlines()[1].split()
        assert row[0] == "AI" and row[1] == "[0.68]" and row[6] == "0.14"
        assert "AI,EN,14,0.140000" in cm.to_csv()

    def test_unseen_label(self):
        with pytest.raises(ValueError):
            P.confusion(["z"], ["a"], ["a", "b"])

    def test_rows_sum_to_one_and_counts_total(self):
        rng = np.random.default_rng(0)
        classes = list("abcd")
        t = rng.choice(classes, 200)
        p = rng.choice(classes, 200)
        cm = P.confusion(list(p), list(t), classes)
        np.testing.assert_allclose(cm.rates.sum(axis=1), 1, atol=1e-12)
        assert cm.counts.sum() == 200 and cm.counts.dtype.kind == "i"


class TestMetrics:
    def test_macro_f1(self):
        assert P.macro_f1(["a", "a", "b"], ["a", "b", "b"], ["a", "b"]) == pytest.approx((2 / 3 + 2 / 3) / 2)
        assert P.macro_f1(["a"], ["a"], ["a", "b"]) == 1.0

    def test_accuracy(self):
        assert P.accuracy(["a", "b"], ["a", "a"]) == 0.5


class TestAvgRank:
    def test_reference_table(self):
        ranking = P.avg_rank(REFERENCE_ACCURACIES)
        assert ranking[0] == ("Proposed (DA)", 1.25)

    def test_single_method(self):
        assert P.avg_rank({"m": [0.3, 0.9]}) == [("m", 1.0)]

    def test_ties_average(self):
        assert dict(P.avg_rank({"a": [0.5, 0.7], "b": [0.5, 0.7]})) == {"a": 1.5, "b": 1.5}

    def test_nan_excluded(self):
        with pytest.warns(UserWarning, match="excluded"):
            ranking = P.avg_rank({"a": [0.5, float("nan")], "b": [0.4, 0.4]})
        assert ranking == [("b", 1.0)]


def item(item_id, kind, fold, gan_fold=0, label="x"):
    return P.Item(item_id, kind, item_id.split("__")[0], item_id, label, fold, f"{item_id}.surf", gan_fold)


class TestLeakageGuard:
    ITEMS = [item("a__t1", "original", 1), item("a__t0.9", "shifted", 1), item("b__t1", "original", 2),
             item("b__t0.9", "shifted", 2), item("fold1/b__gan", "gan", 2, gan_fold=1),
             item("fold2/a__gan", "gan", 1, gan_fold=2)]

    def test_training_set_for_fold_1(self):
        ids = [it.item_id for it in P.training_items(self.ITEMS, 1)]
        assert ids == ["b__t1", "b__t0.9", "fold1/b__gan"]

    def test_gan_excluded_when_disabled(self):
        assert all(it.kind != "gan" for it in P.training_items(self.ITEMS, 2, include_gan=False))

    def test_test_items_are_originals(self):
        assert [it.item_id for it in P.test_items(self.ITEMS, 1)] == ["a__t1"]

    def test_violations_raise(self):
        with pytest.raises(P.LeakageError):
            P.check_no_leak([self.ITEMS[1]], 1)
        with pytest.raises(P.LeakageError):
            P.check_no_leak([self.ITEMS[5]], 1)


def small_cfg(**updates):
    cfg = load_config(profile="desk").with_updates(
        gan={"epochs": 1, "max_pair_samples": 4, "confusion_trees": 5, "n_generated": 6},
        codebook={"k": 16}, forest={"n_trees": 10})
    return cfg.with_updates(**updates) if updates else cfg


class TestCrossValidation:
    def test_separable_descriptors_perfect(self):
        rng = np.random.default_rng(1)
        centers = rng.standard_normal((3, 64))
        descs, labels, folds = [], [], []
        for i in range(45):
            c = i % 3
            descs.append(centers[c] + 0.01 * rng.standard_normal((12, 64)))
            labels.append(f"c{c}")
            folds.append(i // 3 % 5 + 1)
        pred = P.crossval_predict(descs, labels, folds, small_cfg(codebook={"k": 6}), seed=0)
        assert np.mean(pred == np.array(labels)) == 1.0

    def test_shuffled_labels_chance_level(self):
        rng = np.random.default_rng(2)
        descs = [rng.standard_normal((15, 64)) for _ in range(300)]
        labels = [f"c{i % 10}" for i in range(300)]
        rng.shuffle(labels)
        folds = [i % 5 + 1 for i in range(300)]
        pred = P.crossval_predict(descs, labels, folds, small_cfg(forest={"n_trees": 30}), seed=0)
        assert abs(np.mean(pred == np.array(labels)) - 0.10) <= 0.05


@pytest.fixture(scope="module")
def mini_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("mini")
    manifest = synth.write_dataset(root, n_per_class=10, n_classes=3, seed=3, duration=0.5)
    return P.load_manifest(manifest)


@pytest.fixture(scope="module")
def full_run(mini_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    report = P.run_stage("all", small_cfg(seed=5), out, mini_dataset)
    return out, report


def artifact_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.parts[len(root.parts)] != "reports"}


class TestStages:
    def test_all_emits_ten_reports(self, full_run):
        out, report = full_run
        names = sorted(p.stem for p in (out / "reports").glob("*.json"))
        assert len(names) == 10
        assert set(names) == set(P.STAGES) | {"all"}
        assert not report["cache_hit"]

    def test_metrics_written(self, full_run):
        out, _ = full_run
        metrics = json.loads((out / "metrics/metrics.json").read_text())
        assert len(metrics["per_fold"]) == 5
        assert sum(f["n_test"] for f in metrics["per_fold"]) == 30
        assert np.sum(metrics["confusion_counts"]) == 30
        assert "[" in (out / "metrics/confusion.txt").read_text()

    def test_rerun_is_cache_hit(self, full_run, mini_dataset):
        out, _ = full_run
        before = artifact_bytes(out)
        report = P.run_stage("codebook", small_cfg(seed=5), out, mini_dataset)
        assert report["cache_hit"]
        assert artifact_bytes(out) == before

    def test_changed_config_recomputes(self, full_run, mini_dataset, tmp_path):
        out, _ = full_run
        report = P.run_stage("evaluate", small_cfg(seed=5, dataset={"name": "renamed"}), out, mini_dataset)
        assert not report["cache_hit"]
        assert json.loads((out / "metrics/metrics.json").read_text())["dataset"] == "renamed"

    def test_generated_names_and_provenance(self, full_run):
        out, _ = full_run
        gan = P.read_items(out / "index/gan.csv")
        assert len(gan) == 5 * 6  # n_generated per fold
        for it in gan:
            assert it.fold != it.gan_fold
            name = Path(it.path).name
            assert name.startswith(f"{it.parent_id}__gan_") and name.endswith(".pgm")
            assert f"_to_{it.label}_" in name
            assert (out / it.path).exists()

    def test_pairs_trained_per_fold(self, full_run):
        out, _ = full_run
        for k in range(1, 6):
            doc = json.loads((out / f"gan/fold{k}/pairs.json").read_text())
            assert sum(p["mode"] == "intra" for p in doc["pairs"]) == 3
            for p in doc["pairs"]:
                assert (out / p["checkpoint"]).exists()
                assert set(p["sources"]) <= set(p["generate_from"]) or p["mode"] == "inter"

    def test_raw_spectrogram_names(self, full_run):
        out, _ = full_run
        names = sorted(p.name for p in (out / "spectrograms/raw").glob("*.pgm"))
        assert len(names) == 30 and names[0].startswith("burst_000")

    def test_dependency_order(self, mini_dataset, tmp_path):
        with pytest.raises(P.DependencyError, match="run stage gan-train first"):
            P.run_stage("gan-generate", small_cfg(), tmp_path, mini_dataset)

    def test_deterministic_artifacts(self, full_run, mini_dataset, tmp_path):
        out, _ = full_run
        # the earlier tests may have re-run stages with another config; compare fresh runs
        a, b = tmp_path / "a", tmp_path / "b"
        P.run_stage("all", small_cfg(seed=5), a, mini_dataset)
        P.run_stage("all", small_cfg(seed=5), b, mini_dataset)
        assert artifact_bytes(a) == artifact_bytes(b)

    def test_kfold_eval_and_gan_toggle(self, mini_dataset, tmp_path):
        metrics = P.kfold_eval(mini_dataset, small_cfg(gan={"enabled": False}), k=5, out=tmp_path)
        assert metrics["gan"] is False
        assert not P.read_items(tmp_path / "index/gan.csv")
        assert 0.0 <= metrics["mean_accuracy"] <= 1.0

    def test_shared_cache_reuses_work(self, mini_dataset, tmp_path):
        cfg = small_cfg(gan={"enabled": False})
        P.run_stage("all", cfg, tmp_path / "a", mini_dataset, cache_dir=tmp_path / "cache")
        P.run_stage("all", cfg, tmp_path / "b", mini_dataset, cache_dir=tmp_path / "cache")
        assert artifact_bytes(tmp_path / "a") == artifact_bytes(tmp_path / "b")
        assert any((tmp_path / "cache").rglob("*"))


class TestCli:
    def test_synth_and_all(self, tmp_path):
        data = tmp_path / "data"
        assert main(["synth", "--out", str(data), "--per-class", "5", "--classes", "2"]) == 0
        cfg = data / "small.ini"
        cfg.write_text((data / "run.ini").read_text() + "\n[gan]\nenabled = false\n[codebook]\nk = 8\n"
                       "[forest]\nn_trees = 5\n[evaluation]\nfolds = 5\n")
        code = main(["all", "--config", str(cfg), "--profile", "desk", "--seed", "1", "--out", str(tmp_path / "r")])
        assert code == 0
        assert (tmp_path / "r/metrics/metrics.json").exists()

    def test_config_error(self, tmp_path):
        bad = tmp_path / "bad.ini"
        bad.write_text("[surf]\nthreshhold = 3\n")
        assert main(["all", "--config", str(bad), "--out", str(tmp_path / "r")]) == 2

    def test_missing_manifest_is_config_error(self, tmp_path):
        assert main(["augment1d", "--profile", "desk", "--out", str(tmp_path / "r")]) == 2

    def test_dependency_error(self, tmp_path):
        data = tmp_path / "data"
        main(["synth", "--out", str(data), "--per-class", "2", "--classes", "2"])
        code = main(["gan-generate", "--config", str(data / "run.ini"), "--profile", "desk", "--out", str(tmp_path / "r")])
        assert code == 3

    def test_data_error(self, tmp_path):
        write_manifest(tmp_path, [("a.wav", "dog", 7)])
        (tmp_path / "run.ini").write_text("[dataset]\nmanifest = m.csv\n")
        assert main(["augment1d", "--config", str(tmp_path / "run.ini"), "--out", str(tmp_path / "r")]) == 4

    def test_corrupt_wav_is_data_error(self, tmp_path):
        write_manifest(tmp_path, [("a.wav", "dog", 1)])
        (tmp_path / "a.wav").write_bytes(b"RIFF garbage")
        (tmp_path / "run.ini").write_text("[dataset]\nmanifest = m.csv\n")
        assert main(["augment1d", "--config", str(tmp_path / "run.ini"), "--out", str(tmp_path / "r")]) == 4

    def test_profile_print(self, capsys):
        assert main(["profile", "desk"]) == 0
        assert "[scalogram]" in capsys.readouterr().out
