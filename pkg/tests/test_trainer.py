"""Training loop tests at miniature scale: determinism, logging, evaluation."""

import numpy as np
import pytest

from oodseg.estimators import SCORERS
from oodseg.head import HeadConfig, head_init, load_head
from oodseg.synthworld import (
    SceneSpec,
    fit_frozen_decoder,
    frozen_digest,
    generate_scene,
)
from oodseg.tensorio import IGNORE
from oodseg.trainer import (
    AdamState,
    TrainConfig,
    TrainingAbortedError,
    evaluate,
    train,
    write_eval_csv,
    write_trainlog_csv,
)

SPEC = SceneSpec(height=32, width=32, classes=3)
HEAD_CFG = HeadConfig(feature_dim=8, blocks=2, hidden=8)


@pytest.fixture(scope="module")
def frozen():
    return fit_frozen_decoder(SPEC, feature_dim=8, n_scenes=20, seed=5)


@pytest.fixture(scope="module")
def images():
    return [generate_scene(SPEC, np.random.default_rng([1, i]))[0] for i in range(4)]


@pytest.fixture(scope="module")
def eval_set():
    out = []
    for i in range(3):
        img, _, anom = generate_scene(SPEC, np.random.default_rng([2, i]), anomalies=True)
        out.append((img, anom.astype(np.uint8)))
    return out


def tiny_cfg(**kwargs):
    base = dict(
        iterations=6,
        batch_size=2,
        warmup_iters=3,
        n_patches=2,
        gamma=5.0,
        seed=0,
    )
    base.update(kwargs)
    return TrainConfig(**base)


class TestTrainConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [
            {"iterations": 0},
            {"batch_size": 0},
            {"n_patches": 0},
            {"warmup_iters": -1},
            {"gamma": -1.0},
            {"lr": 0.0},
            {"refine_mode": "fixed"},
            {"margin": "soft"},
            {"w_a": -0.5},
            {"max_abort_frac": 1.5},
        ],
    )
    def test_rejects(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)


class TestAdam:
    def test_constant_gradient_steps_by_lr(self):
        # with bias correction a constant gradient g gives m-hat = g and
        # v-hat = g*g at every step, so each update is lr * g / (|g| + eps)
        params = head_init(HeadConfig(feature_dim=3, blocks=1, hidden=2), seed=0)
        cfg = TrainConfig(lr=0.01)
        adam = AdamState(params)
        grads = {name: np.full_like(arr, 2.0) for name, arr in params.trainable()}
        before = {name: arr.copy() for name, arr in params.trainable()}
        expected_delta = 0.01 * 2.0 / (2.0 + cfg.adam_eps)
        for step in range(1, 3):
            adam.step(params, grads, cfg)
            for name, arr in params.trainable():
                np.testing.assert_allclose(
                    before[name] - arr, step * expected_delta, atol=1e-12
                )


class TestTrain:
    def test_tiny_run_logs_every_iteration(self, frozen, images):
        head, log = train(images, frozen, tiny_cfg(), head_config=HEAD_CFG)
        assert len(log.records) + log.aborted == 6
        assert log.aborted == 0
        for i, rec in enumerate(log.records):
            assert rec.iteration == i
            assert rec.n_ood > 0
            assert np.isfinite(rec.eta)
            assert rec.ms > 0.0
        init = head_init(HEAD_CFG, seed=0)
        moved = any(
            not np.array_equal(arr, dict(init.trainable())[name])
            for name, arr in head.trainable()
        )
        assert moved

    def test_deterministic_and_parallel_equivalent(self, frozen, images, tmp_path):
        runs = {}
        for tag, parallel in (("a", False), ("b", False), ("p", True)):
            head, log = train(
                images, frozen, tiny_cfg(parallel=parallel), head_config=HEAD_CFG
            )
            path = tmp_path / f"{tag}.csv"
            write_trainlog_csv(log, path)
            runs[tag] = (head, path.read_bytes())
        assert runs["a"][1] == runs["b"][1]
        assert runs["a"][1] == runs["p"][1]
        for name, arr in runs["a"][0].trainable():
            np.testing.assert_array_equal(arr, dict(runs["p"][0].trainable())[name])

    def test_frozen_model_untouched(self, frozen, images):
        before = frozen_digest(frozen)
        train(images, frozen, tiny_cfg(iterations=2), head_config=HEAD_CFG)
        assert frozen_digest(frozen) == before

    def test_warmup_changes_refinement(self, frozen, images, tmp_path):
        _, log_w = train(images, frozen, tiny_cfg(warmup_iters=6), head_config=HEAD_CFG)
        _, log_n = train(images, frozen, tiny_cfg(warmup_iters=0), head_config=HEAD_CFG)
        write_trainlog_csv(log_w, tmp_path / "w.csv")
        write_trainlog_csv(log_n, tmp_path / "n.csv")
        assert (tmp_path / "w.csv").read_bytes() != (tmp_path / "n.csv").read_bytes()

    def test_checkpointing(self, frozen, images, tmp_path):
        head, _ = train(
            images,
            frozen,
            tiny_cfg(iterations=4),
            head_config=HEAD_CFG,
            checkpoint_dir=tmp_path,
            checkpoint_every=2,
        )
        assert (tmp_path / "iter_000002").is_dir()
        final = load_head(tmp_path / "iter_000004")
        for name, arr in head.trainable():
            np.testing.assert_array_equal(arr, dict(final.trainable())[name])

    def test_needs_two_images(self, frozen, images):
        with pytest.raises(ValueError):
            train(images[:1], frozen, tiny_cfg())

    def test_head_channel_mismatch(self, frozen, images):
        with pytest.raises(ValueError):
            train(images, frozen, tiny_cfg(), head_config=HeadConfig(feature_dim=5))

    def test_aborts_when_no_patch_fits(self, frozen, images):
        # a giant donor only yields crops wider than the small target, so
        # every patch is skipped whenever the small image is the target
        big = np.zeros((600, 600, 3), dtype=np.uint8)
        mixed = [images[0], big]
        with pytest.raises(TrainingAbortedError):
            train(mixed, frozen, tiny_cfg(iterations=8), head_config=HEAD_CFG)

    def test_abort_tolerance(self, frozen, images):
        big = np.zeros((600, 600, 3), dtype=np.uint8)
        mixed = [images[0], big]
        head, log = train(
            mixed,
            frozen,
            tiny_cfg(iterations=8, max_abort_frac=1.0),
            head_config=HEAD_CFG,
        )
        assert log.aborted > 0
        assert len(log.records) == 8 - log.aborted


class TestEvaluate:
    def test_headless_reports_baselines_only(self, frozen, eval_set):
        results = evaluate(None, frozen, eval_set)
        assert list(results) == ["jem", "msp", "entropy", "max_logit"]

    def test_with_head_reports_all_scorers_in_order(self, frozen, eval_set):
        head = head_init(HEAD_CFG, seed=3)
        results = evaluate(head, frozen, eval_set)
        assert list(results) == list(SCORERS)
        n_pos = sum(int((gt == 1).sum()) for _, gt in eval_set)
        n_neg = sum(int((gt == 0).sum()) for _, gt in eval_set)
        for r in results.values():
            assert r.n_pos == n_pos and r.n_neg == n_neg
            assert 0.0 <= r.auroc <= 1.0

    def test_ignore_pixels_are_excluded(self, frozen, eval_set):
        from oodseg.estimators import jem_map
        from oodseg.metrics import evaluate_scores
        from oodseg.synthworld import frozen_encoder, seg_logits_map

        img, gt = eval_set[0]
        gt = gt.copy()
        gt[:4, :] = IGNORE
        results = evaluate(None, frozen, [(img, gt)])
        seg = seg_logits_map(frozen, frozen_encoder(frozen, img))
        valid = gt != IGNORE
        expect = evaluate_scores(jem_map(seg)[valid], gt[valid].astype(np.int64))
        assert results["jem"] == expect
        assert results["jem"].n_pos == int((gt == 1).sum())
        assert results["jem"].n_neg == int((gt == 0).sum())

    def test_validation(self, frozen, eval_set):
        with pytest.raises(ValueError):
            evaluate(None, frozen, [])
        img, gt = eval_set[0]
        with pytest.raises(ValueError):
            evaluate(None, frozen, [(img, gt[:-1])])
        bad = gt.copy()
        bad[0, 0] = 2
        with pytest.raises(ValueError):
            evaluate(None, frozen, [(img, bad)])


class TestCsvEmission:
    def test_trainlog_schema_and_timing_suppression(self, frozen, images, tmp_path):
        _, log = train(images, frozen, tiny_cfg(iterations=3), head_config=HEAD_CFG)
        plain = tmp_path / "plain.csv"
        timed = tmp_path / "timed.csv"
        write_trainlog_csv(log, plain)
        write_trainlog_csv(log, timed, timing=True)
        lines = plain.read_text().splitlines()
        assert lines[0] == "iter,l_a,l_o,n_ood,n_ignored,eta,ms"
        assert len(lines) == 1 + len(log.records)
        for line in lines[1:]:
            assert line.split(",")[6] == "0"
        timed_lines = timed.read_text().splitlines()
        assert all(float(l.split(",")[6]) > 0.0 for l in timed_lines[1:])
        # every float is emitted via repr and parses back exactly
        rec = log.records[0]
        row = lines[1].split(",")
        assert float(row[1]) == rec.l_a and float(row[5]) == rec.eta

    def test_eval_schema(self, frozen, eval_set, tmp_path):
        results = evaluate(None, frozen, eval_set)
        path = tmp_path / "eval.csv"
        write_eval_csv(results, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "scorer,ap,auroc,fpr95,n_pos,n_neg"
        assert [l.split(",")[0] for l in lines[1:]] == list(results)
        row = lines[1].split(",")
        first = results[row[0]]
        assert float(row[1]) == first.ap
        assert float(row[2]) == first.auroc
        assert int(row[4]) == first.n_pos
