import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from label_refinery.checkpoint import model_hash
from label_refinery.data import CropSpec, center_crop, make_dataset, to_batch
from label_refinery.evaluation import (
    MetricsRecord,
    audit_crops,
    curves_csv,
    evaluate_split,
    gap_csv,
    gap_report,
    per_category_accuracy,
    per_category_csv,
    per_category_from_logits,
    plot_curves,
    plot_gap,
    read_metrics,
    topk_accuracy,
    topk_from_logits,
    write_metrics,
)
from label_refinery.exceptions import InvalidInputError
from label_refinery.nn import Classifier
from label_refinery.synthetic import CLASS_NAMES, composite_image


class Oracle:
    """Stand-in model whose logits are supplied by the test."""

    def __init__(self, model, logits):
        self.arch = model.arch
        self._logits = np.asarray(logits, np.float32)

    def predict_logits(self, batch, batch_size=256):
        assert len(batch) == len(self._logits)
        return self._logits


@pytest.fixture
def twenty(tiny_data):
    train, _ = tiny_data
    raw = np.stack([train.image(i) for i in range(20)]) * train.std + train.mean
    labels = np.array([0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 0, 0, 1, 1, 2, 3, 3, 3, 9, 9])
    return make_dataset(raw, labels, CLASS_NAMES, split="val")


class TestTopK:
    def test_perfect_model(self, twenty, smallnet):
        labels = twenty.read_labels(purpose="setup")
        oracle = Oracle(smallnet, np.eye(10)[labels])
        assert topk_accuracy(oracle, twenty, 1) == 100.0
        np.testing.assert_array_equal(per_category_accuracy(oracle, twenty), 100.0)

    def test_k_equals_num_classes(self, twenty, smallnet):
        assert topk_accuracy(smallnet, twenty, 10) == 100.0

    def test_k_too_large(self, twenty, smallnet):
        with pytest.raises(InvalidInputError):
            topk_accuracy(smallnet, twenty, 11)

    def test_ties_favour_lower_index(self):
        logits = np.zeros((2, 3))
        assert topk_from_logits(logits, [0, 1], 1) == 50.0
        assert topk_from_logits(logits, [2, 2], 2) == 0.0

    def test_random_logits_hit_rate(self):
        rng = np.random.default_rng(0)
        labels = np.arange(20_000) % 10
        for k in (1, 3, 5):
            acc = topk_from_logits(rng.standard_normal((20_000, 10)), labels, k)
            # binomial standard error at n=20000 is below 0.4 points
            assert acc == pytest.approx(10 * k, abs=1.5)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_monotone_in_k(self, seed):
        rng = np.random.default_rng(seed)
        logits = rng.standard_normal((30, 6))
        labels = rng.integers(0, 6, 30)
        accs = [topk_from_logits(logits, labels, k) for k in range(1, 7)]
        assert all(a <= b for a, b in zip(accs, accs[1:])) and accs[-1] == 100.0

    def test_evaluation_has_no_side_effects(self, trained_teacher, twenty):
        before = model_hash(trained_teacher)
        evaluate_split(trained_teacher, twenty)
        assert model_hash(trained_teacher) == before
        assert twenty.label_reads["training"] == 0


class TestPerCategory:
    def test_brute_force_tally(self, trained_teacher, twenty):
        labels = twenty.read_labels(purpose="test")
        preds = [int(np.argmax(trained_teacher.predict_logits(to_batch([center_crop(twenty.image(i), 32)]))))
                 for i in range(20)]
        expected = []
        for c in range(10):
            members = [i for i in range(20) if labels[i] == c]
            expected.append(100.0 * sum(preds[i] == c for i in members) / len(members))
        np.testing.assert_allclose(per_category_accuracy(trained_teacher, twenty), expected)

    def test_weighted_sum_is_overall(self, trained_teacher, twenty):
        per = per_category_accuracy(trained_teacher, twenty)
        counts = np.bincount(twenty.read_labels(purpose="test"), minlength=10)
        assert np.sum(per * counts) / counts.sum() == pytest.approx(topk_accuracy(trained_teacher, twenty, 1))

    def test_missing_category_is_nan(self):
        out = per_category_from_logits(np.eye(3)[[0, 0]], [0, 0], 3)
        assert out[0] == 100.0 and math.isnan(out[1]) and math.isnan(out[2])


class TestGapReport:
    def test_worked_example(self):
        report = gap_report([10, 20, 30, 40], [5, 15, 25, 35], num_bins=2)
        assert [b.categories for b in report.bins] == [[0, 1], [2, 3]]
        assert [b.mean_val for b in report.bins] == [10.0, 30.0]
        assert [b.mean_train for b in report.bins] == [15.0, 35.0]

    def test_identical_vectors(self):
        acc = np.linspace(0, 100, 13)
        for b in gap_report(acc, acc, 4).bins:
            assert b.mean_train == b.mean_val

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 60), st.data())
    def test_partition(self, k, data):
        bins = data.draw(st.integers(1, k))
        rng = np.random.default_rng(k)
        report = gap_report(rng.uniform(0, 100, k), rng.uniform(0, 100, k), bins)
        members = [c for b in report.bins for c in b.categories]
        assert sorted(members) == list(range(k))
        sizes = [len(b.categories) for b in report.bins]
        assert max(sizes) - min(sizes) <= 1
        means = [b.mean_train for b in report.bins]
        assert means == sorted(means)

    def test_errors(self):
        with pytest.raises(InvalidInputError):
            gap_report([1, 2], [1, 2], 3)
        with pytest.raises(InvalidInputError):
            gap_report([1, 2], [1], 1)
        with pytest.raises(InvalidInputError):
            gap_report([1, np.nan], [1, 2], 1)


class TestAudit:
    def test_full_image_matches_center_crop(self, trained_teacher, twenty):
        img = twenty.image(3)
        _, rows = audit_crops(trained_teacher, img, [CropSpec(0, 0, 32, 32)], k=1, class_names=CLASS_NAMES)
        expected = int(np.argmax(trained_teacher.predict_logits(twenty.center_crops(32, [3]))))
        assert rows[0][0][0] == CLASS_NAMES[expected]

    def test_rows_sorted(self, trained_teacher, twenty):
        specs, rows = audit_crops(trained_teacher, twenty.image(0), 8, k=5, rng=np.random.default_rng(1))
        assert len(specs) == len(rows) == 8
        for row in rows:
            probs = [p for _, p in row]
            assert all(a >= b for a, b in zip(probs, probs[1:]))

    def test_deterministic(self, trained_teacher, twenty):
        a = audit_crops(trained_teacher, twenty.image(0), 4, rng=np.random.default_rng(5))
        b = audit_crops(trained_teacher, twenty.image(0), 4, rng=np.random.default_rng(5))
        assert a == b

    def test_composite_crops_disagree(self, trained_teacher, small_data):
        train, _ = small_data
        rng = np.random.default_rng(0)
        left, right = CropSpec(0, 0, 16, 32), CropSpec(16, 0, 16, 32)
        differ = 0
        for a, b in [(0, 2), (4, 8), (1, 6), (3, 9), (5, 7)]:
            img = (composite_image(rng, a, b) - train.mean) / train.std
            _, rows = audit_crops(trained_teacher, img, [left, right], k=1)
            differ += rows[0][0][0] != rows[1][0][0]
        assert differ >= 4


class TestMetricsRecord:
    def _record(self):
        rec = MetricsRecord("s1")
        rec.log(0, train_loss=2.0, train_lr=0.1)
        rec.log(0, train_top1=20.0, val_top1=18.0, val_top5=60.0)
        rec.log(1, train_loss=1.5, train_lr=0.01, train_top1=40.0, val_top1=35.0, val_top5=80.0)
        rec.train_per_category = np.array([50.0, np.nan, 30.0])
        rec.val_per_category = np.array([40.0, 20.0, 45.0])
        rec.wall_clock = 1.25
        return rec

    def test_summary(self):
        s = self._record().summary()
        assert s["gap"] == 5.0 and s["val_top1"] == 35.0 and s["wall_clock"] == 1.25

    def test_round_trip(self, tmp_path):
        path = tmp_path / "m.jsonl"
        write_metrics(self._record(), path)
        back = read_metrics(path)
        assert back.epochs == self._record().epochs
        np.testing.assert_array_equal(back.train_per_category, self._record().train_per_category)
        write_metrics(back, tmp_path / "again.jsonl")
        assert (tmp_path / "again.jsonl").read_bytes() == path.read_bytes()

    def test_record_fields(self, tmp_path):
        import json
        path = tmp_path / "m.jsonl"
        write_metrics(self._record(), path)
        for line in path.read_text().splitlines():
            assert set(json.loads(line)) == {"stage", "epoch", "split", "metric", "value"}

    def test_csv_exports(self):
        rec = self._record()
        text = per_category_csv(rec.train_per_category, rec.val_per_category, ["a", "b", "c"])
        lines = text.splitlines()
        assert lines[0] == "class_index,class_name,train_acc,val_acc"
        assert lines[1].startswith("0,a,50")
        assert gap_csv(gap_report([1, 2, 3], [3, 2, 1], 3)).splitlines()[0] == "bin,mean_train,mean_val,std_val"
        assert curves_csv(rec).splitlines()[0].startswith("epoch")

    def test_svg_output(self, tmp_path):
        rec = self._record()
        plot_curves(rec, tmp_path / "c.svg")
        plot_gap({"s1": gap_report([1, 2, 3], [3, 2, 1], 3)}, tmp_path / "g.svg")
        for name in ("c.svg", "g.svg"):
            assert "<svg" in (tmp_path / name).read_text()
