import itertools

import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st

from dancount.config import TrainConfig
from dancount.data import samples_from_synth
from dancount.errors import ValidationError
from dancount.evaluation import (
    ImagePrediction,
    ablate,
    fold_indices,
    fuse_counts,
    infer_count,
    mae_mse,
    report,
    transfer,
)
from dancount.network import build_base, build_networks
from dancount.synth import synth_images
from dancount.training import TrainedModel, finetune_heads


def select_and_sum(lcn, hcn, mask):
    total = 0.0
    for i in range(mask.shape[0]):
        for j in range(mask.shape[1]):
            total += hcn[i][j] if mask[i][j] else lcn[i][j]
    return total


class TestFusion:
    def test_worked_example(self):
        lcn = [[1, 2], [3, 4]]
        hcn = [[10, 20], [30, 40]]
        assert fuse_counts(lcn, hcn, [[0, 1], [1, 0]]) == 55

    def test_degenerate_masks(self, rng):
        lcn, hcn = rng.random((2, 8, 8)) * 10
        assert fuse_counts(lcn, hcn, np.zeros((8, 8))) == pytest.approx(lcn.sum(), rel=1e-12)
        assert fuse_counts(lcn, hcn, np.ones((8, 8))) == pytest.approx(hcn.sum(), rel=1e-12)

    def test_exhaustive_2x2(self, rng):
        lcn, hcn = rng.normal(size=(2, 2, 2)) * 7
        for bits in itertools.product((0, 1), repeat=4):
            mask = np.array(bits).reshape(2, 2)
            assert fuse_counts(lcn, hcn, mask) == pytest.approx(select_and_sum(lcn, hcn, mask), rel=1e-12, abs=1e-12)

    def test_random_8x8(self, rng):
        for _ in range(200):
            lcn, hcn = rng.random((2, 8, 8)) * 50
            mask = rng.integers(0, 2, size=(8, 8))
            assert fuse_counts(lcn, hcn, mask) == pytest.approx(select_and_sum(lcn, hcn, mask), rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            fuse_counts(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((4, 4)))


class TestMetrics:
    def test_fixture(self):
        assert mae_mse([100, 200], [110, 190]) == (10.0, 10.0)

    def test_mixed_errors(self):
        mae, mse = mae_mse([0, 0, 0, 0], [1, -1, 3, -3])
        assert mae == 2.0 and mse == pytest.approx(np.sqrt(5.0))

    def test_perfect_and_single(self):
        assert mae_mse([3, 4], [3, 4]) == (0.0, 0.0)
        assert mae_mse([10], [2.5]) == (7.5, 7.5)

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            mae_mse([], [])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1e300, 1e300), min_size=1, max_size=40))
    @example([3.2872067602358303e-180])  # squares underflow to zero
    @example([1e200, -1e200])  # squares overflow
    def test_mae_never_exceeds_rmse(self, errs):
        mae, mse = mae_mse(np.zeros(len(errs)), errs)
        assert mae <= mse * (1 + 1e-12)


def fake_prediction(rng, name="x", perfect=False):
    lc, hc = rng.random((2, 4, 4)) * 10
    gt = rng.integers(0, 2, size=(4, 4))
    dan = gt.copy() if perfect else rng.integers(0, 2, size=(4, 4))
    return ImagePrediction(name, float(rng.integers(0, 100)), lc, hc, dan, gt)


class TestReport:
    def test_perfect_dan_equals_ideal(self, rng):
        preds = [fake_prediction(rng, perfect=True) for _ in range(5)]
        g, i = report(preds, "gated"), report(preds, "ideal_gate")
        assert g.mae == i.mae and g.mse == i.mse and g.dan_accuracy == 1.0

    def test_accuracy_is_cell_fraction(self, rng):
        preds = [fake_prediction(rng) for _ in range(3)]
        correct = sum((p.dan_classes == p.gt_classes).sum() for p in preds)
        assert report(preds).dan_accuracy == correct / 48

    def test_modes(self, rng):
        p = fake_prediction(rng)
        assert p.total("lcn_only") == pytest.approx(p.lcn_counts.sum())
        assert p.total("hcn_only") == pytest.approx(p.hcn_counts.sum())
        with pytest.raises(ValidationError):
            report([p], "oracle")
        with pytest.raises(ValidationError):
            report([], "gated")

    def test_invariant_mae_le_mse(self, rng):
        preds = [fake_prediction(rng, str(i)) for i in range(10)]
        for mode in ("gated", "lcn_only", "hcn_only", "ideal_gate"):
            r = report(preds, mode)
            assert r.mae <= r.mse


class TestFolds:
    def test_fifty_images(self):
        folds = fold_indices(50, seed=0)
        assert [len(f) for f in folds] == [10] * 5

    def test_fifty_two_images(self):
        assert [len(f) for f in fold_indices(52, seed=1)] == [11, 11, 10, 10, 10]

    @settings(max_examples=40, deadline=None)
    @given(st.integers(5, 300), st.integers(0, 1000))
    def test_partition(self, n, seed):
        folds = fold_indices(n, seed)
        allidx = np.concatenate(folds)
        assert sorted(allidx.tolist()) == list(range(n))
        sizes = [len(f) for f in folds]
        assert max(sizes) - min(sizes) <= 1
        assert all(np.array_equal(a, b) for a, b in zip(folds, fold_indices(n, seed)))

    def test_too_few(self):
        with pytest.raises(ValidationError):
            fold_indices(4, seed=0)


@pytest.fixture(scope="module")
def tiny():
    cfg = TrainConfig(input_size=32, grid=(2, 2), batch_size=2, pretrain_epochs=0,
                      head_epochs=0, finetune_epochs=0, sigma=1.5, seed=0)
    samples = samples_from_synth(synth_images(6, 3, size=32), cfg)
    return cfg, samples


class TestInference:
    def test_infer_matches_manual_fusion(self, tiny, rng):
        cfg, samples = tiny
        dan, lcn, hcn = build_networks(32, (2, 2), seed=1)
        model = TrainedModel(dan, lcn, hcn, th=1.0)
        res = infer_count(samples[0].image, model)
        assert res.total == pytest.approx(fuse_counts(res.lcn_counts, res.hcn_counts, res.classes), rel=1e-9)
        assert res.density.shape == (32, 32) and res.classes.shape == (2, 2)

    def test_separate_bases_path(self, tiny):
        cfg, samples = tiny
        dan, lcn, hcn = build_networks(32, (2, 2), seed=1)
        hcn.layers["conv5"].bias.data += 0.01  # forces per-network forwards
        res = infer_count(samples[0].image, TrainedModel(dan, lcn, hcn, th=1.0))
        assert np.isfinite(res.total)

    def test_batch_rejected(self, tiny):
        cfg, samples = tiny
        model = TrainedModel(*build_networks(32, (2, 2), seed=1), th=1.0)
        with pytest.raises(ValidationError):
            infer_count(np.stack([samples[0].image, samples[1].image]), model)

    def test_ablation_modes_share_predictions(self, tiny):
        cfg, samples = tiny
        model = TrainedModel(*build_networks(32, (2, 2), seed=1), th=1.0)
        reps = ablate(samples, model, cfg)
        assert set(reps) == {"gated", "lcn_only", "hcn_only", "ideal_gate"}
        # untrained counters are both plain block sums, so every mode agrees
        vals = {round(r.mae, 6) for r in reps.values()}
        assert len(vals) == 1


class TestTransfer:
    def test_zero_epoch_finetune_equals_wo(self, tiny):
        cfg, samples = tiny
        base = build_base(9)
        a = transfer(base, samples[:4], samples[4:], "wo_finetune", cfg)
        b = transfer(base, samples[:4], samples[4:], "finetune_on_target", cfg)
        for (ta, pa), (tb, pb) in zip(a.pairs, b.pairs):
            assert ta == tb and abs(pa - pb) <= 1e-5 * max(1.0, abs(pa))

    def test_validation(self, tiny):
        cfg, samples = tiny
        with pytest.raises(ValidationError):
            transfer(build_base(0), samples[:4], samples[4:], "sideways", cfg)
        with pytest.raises(ValidationError):
            transfer(None, samples[:4], samples[4:], "wo_finetune", cfg)

    def test_step_needs_no_source(self, tiny):
        cfg, samples = tiny
        rep = transfer(None, samples[:4], samples[4:], "step_on_target", cfg.replace(pretrain_epochs=1))
        assert len(rep.pairs) == 2

    def test_finetune_leaves_source_untouched(self, tiny):
        cfg, samples = tiny
        base = build_base(2)
        before = {k: v.copy() for k, v in base.state_dict().items()}
        finetune_heads(base, samples, cfg.replace(finetune_epochs=1), th=1.0)
        after = base.state_dict()
        assert all(np.array_equal(before[k], after[k]) for k in before)
