"""Acceptance suite: one group of tests per criterion.

Run ``pytest tests/test_acceptance.py -v``; the terminal summary prints one
PASS/FAIL line per criterion (see ``conftest.py``).
"""

import itertools
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from escgan import audio_io
from escgan import codebook as C
from escgan import forest as F
from escgan import pipeline as P
from escgan import surf as S
from escgan import tensor as T
from escgan import wccgan as W
from escgan.config import load_config
from escgan.scalogram import Spectrogram, hist_equalize
from escgan.synth import toy_images, write_dataset
from gradcheck import check
from test_codebook import angle, partition_oracle, two_antipodal_clusters, unit
from test_forest import brute_force_split

N_INSTANCES = 20
GRAD_TOL = 1e-4


def criterion(number, title):
    return pytest.mark.criterion(number, title)


# -- 1: gradients -------------------------------------------------------------------------------

def _proj(rng, shape):
    return T.Tensor(rng.standard_normal(shape))


def _away_from_kinks(x):
    x[np.abs(x) < 1e-3] = 0.1
    return x


def _op_case(name, rng):
    """(build, arrays) for one random instance of an autodiff op."""
    shape = tuple(int(v) for v in rng.integers(2, 5, size=2))
    a, b = rng.standard_normal(shape), rng.standard_normal(shape)
    if name in ("add", "sub", "mul"):
        op = {"add": T.add, "sub": T.sub, "mul": T.mul}[name]
        p = _proj(rng, shape)
        return (lambda x, y: T.sum(op(x, y) * p)), [a, b]
    if name == "scale":
        k, p = float(rng.normal()), _proj(rng, shape)
        return (lambda x: T.sum(T.scale(x, k) * p)), [a]
    if name == "add_scalar":
        k, p = float(rng.normal()), _proj(rng, shape)
        return (lambda x: T.sum(T.square(T.add_scalar(x, k)) * p)), [a]
    if name == "square":
        p = _proj(rng, shape)
        return (lambda x: T.sum(T.square(x) * p)), [a]
    if name == "abs":
        p = _proj(rng, shape)
        return (lambda x: T.sum(T.abs(x) * p)), [_away_from_kinks(a)]
    if name in ("relu", "leaky_relu"):
        op = T.relu if name == "relu" else (lambda t: T.leaky_relu(t, 0.3))
        p = _proj(rng, shape)
        return (lambda x: T.sum(op(x) * p)), [_away_from_kinks(a)]
    if name == "sum_axis":
        p = _proj(rng, shape[1:])
        return (lambda x: T.sum(T.sum(x, axis=0) * p)), [a]
    if name == "mean":
        return (lambda x: T.mean(T.square(x))), [a]
    if name == "concat":
        c = rng.standard_normal((1,) + shape[1:])
        p = _proj(rng, (shape[0] + 1,) + shape[1:])
        return (lambda x, y: T.sum(T.concat([x, y]) * p)), [a, c]
    if name == "slice_batch":
        p = _proj(rng, (1,) + shape[1:])
        return (lambda x: T.sum(T.slice_batch(x, 1, 2) * p)), [a]
    n, cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 3))
    h, w = int(rng.integers(3, 6)), int(rng.integers(3, 6))
    x = rng.standard_normal((n, cin, h, w))
    if name in ("conv2d", "conv2d_stride2"):
        stride = 2 if name.endswith("2") else 1
        k, bias = rng.standard_normal((cout, cin, 3, 3)), rng.standard_normal(cout)
        p = _proj(rng, (n, cout, -(-h // stride), -(-w // stride)))
        return (lambda x, k, b: T.sum(T.conv2d(x, k, b, stride=stride) * p)), [x, k, bias]
    if name == "bilinear_resize":
        oh, ow = int(rng.integers(2, 8)), int(rng.integers(2, 8))
        p = _proj(rng, (n, cin, oh, ow))
        return (lambda x: T.sum(T.bilinear_resize(x, oh, ow) * p)), [x]
    if name in ("instance_norm", "batch_norm"):
        x = rng.standard_normal((2, cin, h, w))
        g, beta = rng.standard_normal(cin), rng.standard_normal(cin)
        norm = T.instance_norm if name == "instance_norm" else T.batch_norm
        p = _proj(rng, x.shape)
        return (lambda x, g, b: T.sum(norm(x, g, b) * p)), [x, g, beta]
    raise KeyError(name)


OPS = ["add", "sub", "mul", "scale", "add_scalar", "square", "abs", "relu", "leaky_relu", "sum_axis", "mean",
       "concat", "slice_batch", "conv2d", "conv2d_stride2", "bilinear_resize", "instance_norm", "batch_norm"]


def _loss_case(name, seed):
    """(build, arrays) for a composite loss as a function of the real source/target batches."""
    rng = np.random.default_rng(seed)
    c1, c2, mu, sigma = rng.uniform(0.05, 1.0, 4)
    hyper = W.GanHyperparams(c1=c1, c2=c2, mu=mu, sigma=sigma, alpha=float(rng.uniform(0.01, 0.5)),
                             gen_channels=(2, 2), disc_channels=(2, 2), net_shape=(4, 4), dtype="float64",
                             seed=seed)
    model = W.WCCGAN(hyper)
    s, t = rng.uniform(-1, 1, (2, 1, 4, 4)), rng.uniform(-1, 1, (2, 1, 4, 4))
    builds = {
        "lsgan_discriminator": lambda s, t: W.lsgan_losses(model.d_t, t, model.bypass_st(s, model.f_st(s)))[0],
        "lsgan_generator": lambda s, t: W.lsgan_losses(model.d_s, s, model.bypass_ts(t, model.f_ts(t)))[1],
        "cycle": lambda s, t: W.cycle_loss(model.f_st, model.f_ts, s, t),
        "total": lambda s, t: model.losses(s, t)["total"],
    }
    return builds[name], [s, t]


LOSSES = ["lsgan_discriminator", "lsgan_generator", "cycle", "total"]


@criterion(1, "gradient suite vs central finite differences")
class TestGradientSuite:
    def test_ops_and_losses(self, note):
        t0 = time.perf_counter()
        worst, count = 0.0, 0
        rng = np.random.default_rng(2024)
        for name in OPS:
            for _ in range(N_INSTANCES):
                build, arrays = _op_case(name, rng)
                err = check(build, arrays)
                assert err < GRAD_TOL, f"{name}: relative error {err:.2e}"
                worst, count = max(worst, err), count + 1
        for name in LOSSES:
            for seed in range(N_INSTANCES):
                build, arrays = _loss_case(name, seed)
                err = check(build, arrays)
                assert err < GRAD_TOL, f"{name} (seed {seed}): relative error {err:.2e}"
                worst, count = max(worst, err), count + 1
        elapsed = time.perf_counter() - t0
        note(f"{count} instances, worst rel. error {worst:.1e}, {elapsed:.1f} s")
        assert elapsed < 120


# -- 2: loss identities -------------------------------------------------------------------------

@criterion(2, "loss identities")
class TestLossIdentities:
    def _batches(self, seed=0):
        rng = np.random.default_rng(seed)
        return T.Tensor(rng.uniform(-1, 1, (3, 1, 8, 8))), T.Tensor(rng.uniform(-1, 1, (3, 1, 8, 8)))

    def test_perfect_discriminator(self):
        loss_d, _ = W.lsgan_from_scores(T.Tensor(np.ones((4, 1))), T.Tensor(np.zeros((4, 1))))
        assert loss_d.item() == 0.0

    def test_identity_generators_cycle(self):
        s, t = self._batches()
        assert W.cycle_loss(lambda x: x, lambda x: x, s, t).item() == 0.0

    def test_total_alpha_zero(self):
        s, t = self._batches(1)
        model = W.WCCGAN(W.GanHyperparams(gen_channels=(2, 3), disc_channels=(2, 3), net_shape=(8, 8),
                                          dtype="float64", alpha=0.3))
        parts = model.losses(s, t)
        total = W.total_loss(parts["loss_D_T"], parts["loss_D_S"], parts["cycle"], 0.0)
        assert total.item() == parts["loss_D_T"].item() + parts["loss_D_S"].item()

    def test_bypass_identity(self):
        s, _ = self._batches(2)
        fake = T.Tensor(np.random.default_rng(3).uniform(-1, 1, s.shape))
        np.testing.assert_array_equal(W.f_bypass(s, fake, 1.0, 0.0).data, s.data)


# -- 3: toy WCCGAN -------------------------------------------------------------------------------

@criterion(3, "toy WCCGAN convergence")
class TestToyWccgan:
    SHAPE = (32, 64)  # 64 wide, 32 high

    def _hyper(self):
        return W.preset("esc10", n_res_blocks=3, epochs=20, patience=20, gen_channels=(8, 16),
                        disc_channels=(8, 16), net_shape=self.SHAPE, seed=1)

    def _train(self):
        rng = np.random.default_rng(11)
        s = toy_images(0, 24, self.SHAPE, rng).astype(np.float32)
        t = toy_images(1, 24, self.SHAPE, rng).astype(np.float32)
        return W.train_pair(s, t, self._hyper())

    def test_convergence_and_determinism(self, note):
        t0 = time.process_time()
        a = self._train()
        elapsed = time.process_time() - t0
        first, last = a.history[0]["cycle"], a.history[-1]["cycle"]
        rng = np.random.default_rng(99)
        held_s = toy_images(0, 16, self.SHAPE, rng).astype(np.float32)
        held_t = toy_images(1, 16, self.SHAPE, rng).astype(np.float32)
        _, acc = W.discriminator_metrics(a.model, held_s, held_t)
        note(f"cycle {first:.3f} -> {last:.3f} ({last / first:.0%}), held-out D accuracy {acc:.2f}, "
             f"{len(a.history)} epochs in {elapsed:.0f} s CPU")
        assert len(a.history) == 20
        assert last <= 0.5 * first
        assert acc >= 0.8
        assert elapsed < 15 * 60
        b = self._train()
        assert a.history == b.history
        for k, v in a.model.state().items():
            np.testing.assert_array_equal(v, b.model.state()[k])


# -- 4: histogram equalization --------------------------------------------------------------------

def _eq(px):
    return hist_equalize(Spectrogram(np.asarray(px, dtype=np.uint8))).pixels


@criterion(4, "histogram equalization")
class TestHistogramEqualization:
    @pytest.mark.parametrize("c", [0, 1, 128, 255])
    def test_constant_to_white(self, c):
        assert np.all(_eq(np.full((5, 7), c)) == 255)

    def test_two_by_two(self):
        np.testing.assert_array_equal(_eq([[0, 0], [255, 255]]), [[127, 127], [255, 255]])

    def test_random_images_idempotent_and_monotone(self):
        rng = np.random.default_rng(4)
        for i in range(100):
            h, w = rng.integers(1, 40, size=2)
            hi = int(rng.integers(1, 256))
            px = rng.integers(0, hi + 1, (h, w)).astype(np.uint8)
            once = _eq(px)
            np.testing.assert_array_equal(_eq(once), once)
            flat, out = px.ravel(), once.ravel()
            order = np.argsort(flat, kind="stable")
            assert np.all(np.diff(out[order].astype(int)) >= 0)


# -- 5: SURF ---------------------------------------------------------------------------------------

def _blob(shape, cy, cx, sigma, amp=200.0):
    y, x = np.mgrid[:shape[0], :shape[1]]
    return amp * np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2 * sigma ** 2))


@criterion(5, "SURF oracles")
class TestSurf:
    @pytest.mark.parametrize("h,w", [(1, 1), (3, 16), (16, 16)])
    def test_box_sums_exhaustive(self, h, w):
        img = np.random.default_rng(h * 17 + w).integers(0, 256, (h, w))
        ii = S.integral(img)
        for r0, r1 in itertools.combinations_with_replacement(range(h), 2):
            for c0, c1 in itertools.combinations_with_replacement(range(w), 2):
                assert S.box_sum(ii, r0, c0, r1, c1) == img[r0:r1 + 1, c0:c1 + 1].sum()

    def test_determinant_fixture(self):
        assert S.det_from_responses(2.0, 2.0, 1.0) == 4.0 - 0.81
        assert abs(S.det_from_responses(2.0, 2.0, 1.0) - 3.19) < 1e-12

    def test_nine_blobs(self, note):
        img = np.zeros((150, 150))
        centers = [(30 + 45 * i, 30 + 45 * j) for i in range(3) for j in range(3)]
        for cy, cx in centers:
            img += _blob(img.shape, cy, cx, 3.0)
        kps = S.detect(S.integral(img))
        dist = [min(np.hypot(k.x - cx, k.y - cy) for k in kps) for cy, cx in centers]
        note(f"{len(kps)} keypoints, max offset {max(dist):.2f} px")
        assert len(kps) == 9
        assert max(dist) <= 2

    def test_descriptor_dimension(self):
        rng = np.random.default_rng(5)
        seen = 0
        for _ in range(20):
            img = rng.integers(0, 256, (48, 64)).astype(np.uint8)
            for d in S.extract_all(img, threshold=50):
                assert d.vector.shape == (64,)
                seen += 1
        assert seen > 0


# -- 6: spherical K-Means++ -------------------------------------------------------------------------

@criterion(6, "spherical K-Means++")
class TestSphericalKMeans:
    def test_unit_norm_after_every_update(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            X = C.normalize_rows(rng.standard_normal((40, 6)))
            V, _ = C.seed_pp(X, 5, rng)
            for _ in range(15):
                V = C.update(X, C.assign(X, V), V)
                assert np.abs(np.linalg.norm(V, axis=0) - 1).max() <= 1e-9

    @pytest.mark.parametrize("seed", range(3))
    def test_antipodal_clusters_match_oracle(self, seed):
        rng = np.random.default_rng(200 + seed)
        X = two_antipodal_clusters(rng, m=12)
        va, vb = partition_oracle(X)
        cb = C.fit(X, 2, seed=seed)
        got = sorted([cb.V[:, 0], cb.V[:, 1]], key=lambda v: angle(v, va))
        assert angle(got[0], va) < 1e-3 and angle(got[1], vb) < 1e-3

    def test_objective_monotone_50_fits(self):
        for seed in range(50):
            rng = np.random.default_rng(seed)
            m, n = int(rng.integers(10, 100)), int(rng.integers(2, 10))
            cb = C.fit(rng.standard_normal((m, n)), int(rng.integers(2, 8)), seed=seed)
            assert np.all(np.diff(cb.objective_trace) >= -1e-12)

    def test_seeding_chi_square(self, note):
        X = np.array([unit([1, 0]), unit([0.8, 0.6]), unit([-0.6, 0.8]), unit([0, -1])])
        d2 = ((X[:, None] - X[None]) ** 2).sum(-1)
        pairs = [(i, j) for i in range(4) for j in range(4) if i != j]
        expected = np.array([0.25 * d2[i, j] / d2[i].sum() for i, j in pairs])
        gen = np.random.default_rng(8)
        n_trials = 20000
        counts = dict.fromkeys(pairs, 0)
        for _ in range(n_trials):
            _, chosen = C.seed_pp(X, 2, gen)
            counts[tuple(chosen)] += 1
        p = stats.chisquare([counts[q] for q in pairs], expected * n_trials).pvalue
        note(f"chi-square p = {p:.3f}")
        assert p > 0.01


# -- 7: random forest -------------------------------------------------------------------------------

@criterion(7, "random forest")
class TestRandomForest:
    @pytest.mark.parametrize("labels,expected", [([1, 1, 1], 0.0), ([1, 2], 0.5), ([1, 1, 2, 3], 0.625)])
    def test_gini_fixtures(self, labels, expected):
        assert F.gini(labels) == expected

    def test_best_split_exhaustive(self, note):
        # every labeling over a small grid of feature values, for n = 1..8 samples
        rng = np.random.default_rng(7)
        checked = 0
        for n in range(1, 9):
            for _ in range(400):
                X = rng.integers(0, 3, (n, 2)).astype(float)
                k = int(rng.integers(2, 4))
                y = rng.integers(0, k, n)
                got, want = F.best_split(X, y, n_classes=k), brute_force_split(X, y, k)
                assert (got is None) == (want is None)
                if got is not None:
                    assert (got.feature, got.threshold) == want[:2]
                    assert got.gain == pytest.approx(want[2], abs=1e-12)
                checked += 1
        X4 = np.array([[0, 2], [1, 0], [2, 1], [3, 3]], dtype=float)
        for y in itertools.product(range(3), repeat=4):
            y = np.array(y)
            got, want = F.best_split(X4, y, n_classes=3), brute_force_split(X4, y, 3)
            assert (got is None) == (want is None)
            if got is not None:
                assert (got.feature, got.threshold) == want[:2]
            checked += 1
        note(f"{checked} instances")

    def test_separable_train_accuracy(self):
        rng = np.random.default_rng(0)
        X = rng.uniform(0, 1, (100, 8))
        y = (X[:, 0] + X[:, 1] > 1.0).astype(int)
        forest = F.fit(X, y, F.ForestParams(n_trees=50, seed=1))
        assert np.mean(forest.predict(X) == y) == 1.0


# -- 8: end to end ----------------------------------------------------------------------------------

@pytest.fixture(scope="session")
def tonal_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tonal150")
    return P.load_manifest(write_dataset(root, n_per_class=50, n_classes=3, seed=0))


@criterion(8, "end-to-end desk pipeline, 5-fold, DA vs no-DA")
class TestEndToEnd:
    N_REPS = 5

    def test_accuracy_and_augmentation(self, tonal_dataset, tmp_path, note):
        assert len(tonal_dataset) == 150 and len(tonal_dataset.classes) == 3
        t0 = time.process_time()
        cache = tmp_path / "cache"
        rows = []
        for seed in range(self.N_REPS):
            cfg = load_config(profile="desk", seed=seed)
            plain = P.kfold_eval(tonal_dataset, cfg.with_updates(gan={"enabled": False}), k=5,
                                 out=tmp_path / f"plain{seed}", cache_dir=cache)
            augmented = P.kfold_eval(tonal_dataset, cfg, k=5, out=tmp_path / f"da{seed}", cache_dir=cache)
            rows.append((plain["mean_accuracy"], augmented["mean_accuracy"]))
        elapsed = time.process_time() - t0
        plain_acc = np.array([r[0] for r in rows])
        da_acc = np.array([r[1] for r in rows])
        wins = int(np.sum(da_acc >= plain_acc - 1e-12))
        note(f"no-DA {', '.join(f'{a:.3f}' for a in plain_acc)}; DA {', '.join(f'{a:.3f}' for a in da_acc)}; "
             f"DA >= no-DA in {wins}/{self.N_REPS}; {elapsed / 60:.1f} min CPU")
        assert plain_acc.mean() >= 0.90
        assert wins >= 4
        assert elapsed < 30 * 60


# -- 9: reference fixtures --------------------------------------------------------------------------

@criterion(9, "reference-fixture arithmetic")
class TestReferenceFixtures:
    @pytest.mark.parametrize("n_clips,expected", [(8732, 43660), (400, 2000)])
    def test_augmentation_counts(self, n_clips, expected):
        assert audio_io.augmented_count(n_clips, len(audio_io.PITCH_FACTORS)) == expected

    def test_augmentation_count_by_construction(self):
        clips = [audio_io.AudioClip(np.sin(np.arange(800) * 0.3) * 0.3, 8000, source_id=f"c{i}") for i in range(3)]
        assert len(audio_io.augment_dataset(clips, audio_io.PITCH_FACTORS)) == 3 * 5

    def test_average_rank(self):
        table = {  # ESC-10, ESC-50, UrbanSound8k, DCASE-2017
            "Proposed (DA)": [0.87, 0.77, 0.94, 0.76],
            "Proposed": [0.72, 0.55, 0.73, 0.66],
            "GoogLeNet (DA)": [0.86, 0.78, 0.93, 0.73],
            "GoogLeNet": [0.83, 0.71, 0.91, 0.64],
            "AlexNet (DA)": [0.85, 0.75, 0.93, 0.74],
            "AlexNet": [0.83, 0.64, 0.90, 0.62],
        }
        ranking = P.avg_rank(table)
        assert ranking[0] == ("Proposed (DA)", 1.25)

    def test_pair_selection(self):
        classes = ["AI", "CA", "CH", "DO", "DR", "EN", "GU", "JA", "SI", "SM"]
        m = np.eye(10)
        m[0] = [0.68, 0.00, 0.02, 0.01, 0.05, 0.14, 0.01, 0.04, 0.02, 0.03]
        plan = W.select_pairs(m, classes)
        assert [(p.source, p.target) for p in plan.inter()] == [("AI", "EN")]


# -- 10: determinism --------------------------------------------------------------------------------

def _artifacts(root: Path) -> dict:
    # reports/ carries wall-clock timings and is the only non-artifact output
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.relative_to(root).parts[0] != "reports"}


@criterion(10, "byte-identical artifacts per stage")
class TestDeterminism:
    def test_every_stage_repeats_exactly(self, tmp_path, note):
        data = write_dataset(tmp_path / "data", n_per_class=10, n_classes=3, seed=1, duration=0.5)
        manifest = P.load_manifest(data)
        cfg = load_config(profile="desk", seed=7).with_updates(
            augment={"enabled": True}, gan={"epochs": 2, "max_pair_samples": 4, "confusion_trees": 5},
            codebook={"k": 16}, forest={"n_trees": 20})
        a, b = tmp_path / "a", tmp_path / "b"
        for stage in P.STAGES:
            P.run_stage(stage, cfg, a, manifest)
            P.run_stage(stage, cfg, b, manifest)
            assert _artifacts(a) == _artifacts(b), f"{stage} differs between runs"
        reference = _artifacts(a)

        def outputs(tree):
            # recomputing a stage drops the state of the stages after it
            return {k: v for k, v in tree.items() if not k.startswith("state/")}

        # force every stage to recompute in place
        for stage in P.STAGES:
            (a / "state" / f"{stage}.json").unlink(missing_ok=True)
            report = P.run_stage(stage, cfg, a, manifest)
            assert not report["cache_hit"]
            assert outputs(_artifacts(a)) == outputs(reference), f"recomputed {stage} differs"
        assert _artifacts(a) == reference
        note(f"{len(reference)} files identical across {len(P.STAGES)} stages")
