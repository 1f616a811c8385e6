from collections import OrderedDict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from subnetlab import persist
from subnetlab.model import MaskAssignment, ModelConfig, PairBatch, init_model, predict
from subnetlab.taskgen import TaskSpec, generate_task
from subnetlab.trainer import (EncodedData, EvalReport, TrainConfig, TrainingDiverged,
                               batch_indices, evaluate, fine_tune, trim)

SPEC = TaskSpec(n_entities=8, n_verbs=3, n_fillers=6, n_train=256, n_val=64, n_ood=16, seed=2)


@pytest.fixture(scope="module")
def data():
    return EncodedData.from_bundle(generate_task(SPEC))


def small_model(data, seed=0):
    cfg = ModelConfig(n_layers=1, n_heads=2, d_model=8, vocab_size=len(data.vocab),
                      max_positions=data.train.token_ids.shape[1], init_scale=0.3)
    return init_model(cfg, seed)


def train_cfg(**kw):
    base = dict(lr=3e-3, batch_size=16, total_steps=12, checkpoint_every=4, eval_every=4, seed=1)
    base.update(kw)
    return TrainConfig(**base)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(batch_size=0), dict(checkpoint_every=0),
                                    dict(total_steps=-1), dict(lr=-1.0), dict(dropout=1.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestBatches:
    def test_epoch_is_a_permutation(self):
        idx = np.concatenate([batch_indices(s, 40, 8, seed=3) for s in range(5)])
        assert sorted(idx.tolist()) == list(range(40))

    def test_depends_only_on_seed_and_step(self):
        assert np.array_equal(batch_indices(7, 40, 8, 3), batch_indices(7, 40, 8, 3))
        assert not np.array_equal(batch_indices(7, 40, 8, 3), batch_indices(7, 40, 8, 4))

    def test_trim_drops_padding_columns(self, data):
        b = data.train.take(np.arange(4))
        t = trim(b)
        assert t.valid[:, -1].any()
        assert np.array_equal(t.token_ids, b.token_ids[:, :t.token_ids.shape[1]])


class TestFineTune:
    def test_zero_lr_keeps_parameters(self, data):
        m = small_model(data)
        before = m.state()
        fine_tune(m, data, train_cfg(lr=0.0, total_steps=3))
        for k, v in m.state().items():
            assert v.tobytes() == before[k].tobytes()

    def test_single_batch_overfits(self, data):
        # same 16 examples every step: loss strictly decreases for the first 10 steps
        one = data.train.take(np.arange(16))
        tiny = EncodedData(one, data.id_val, data.ood, data.vocab)
        m = small_model(data)
        res = fine_tune(m, tiny, train_cfg(total_steps=10, eval_every=1, checkpoint_every=10))
        losses = [r["loss"] for r in res.metrics if r["split"] == "train"]
        assert len(losses) == 10
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_checkpoint_cadence(self, data):
        res = fine_tune(small_model(data), data, train_cfg(total_steps=10))
        assert [c.step for c in res.checkpoints] == [0, 4, 8, 10]

    def test_metric_log_steps_increase(self, data):
        res = fine_tune(small_model(data), data, train_cfg())
        steps = [r["step"] for r in res.metrics]
        assert steps == sorted(steps)
        distinct = list(dict.fromkeys(steps))
        assert distinct == [0, 4, 8, 12]
        subcases = {r["subcase"] for r in res.metrics if r["split"] == "ood"}
        assert subcases == {"swap", "embed-if", "prep-like"}

    def test_resume_matches_uninterrupted(self, data, tmp_path):
        full = small_model(data)
        fine_tune(full, data, train_cfg())
        part = small_model(data)
        res = fine_tune(part, data, train_cfg(), total_steps=8)
        # go through disk to cover the stored format as well
        persist.save_checkpoint(tmp_path, res.checkpoints[-1])
        ck = persist.load_checkpoint(tmp_path)
        assert ck.step == 8
        resumed = small_model(data, seed=9)
        fine_tune(resumed, data, train_cfg(), resume=ck)
        for k, v in full.state().items():
            assert v.tobytes() == resumed.state()[k].tobytes()

    def test_divergence_reports_last_good(self, data):
        m = small_model(data)
        m.params["W_cls"].data[:] = np.inf
        with pytest.raises(TrainingDiverged) as info, np.errstate(invalid="ignore"):
            fine_tune(m, data, train_cfg())
        assert info.value.step == 1 and info.value.last_good.step == 0

    def test_on_checkpoint_callback(self, data):
        seen = []
        fine_tune(small_model(data), data, train_cfg(total_steps=4), on_checkpoint=seen.append)
        assert [c.step for c in seen] == [0, 4]


class TestEvaluate:
    def test_constant_prediction(self, data):
        m = small_model(data)
        m.params["W_cls"].data[:] = 0.0
        m.params["b_cls"].data[:] = [0.0, 5.0]
        b = data.id_val
        ones = PairBatch(b.token_ids, b.segment_ids, b.valid, np.ones(len(b), np.int64),
                         b.subcases)
        assert evaluate(m, ones).overall == 1.0

    def test_flipped_labels_complement(self, data):
        m = small_model(data)
        b = data.eval_set()
        flipped = PairBatch(b.token_ids, b.segment_ids, b.valid, 1 - b.labels, b.subcases)
        a, c = evaluate(m, b), evaluate(m, flipped)
        for s in a.subcases:
            assert a.accuracy(s) + c.accuracy(s) == pytest.approx(1.0)

    def test_all_ones_masks(self, data):
        m = small_model(data)
        b = data.eval_set()
        assert evaluate(m, b).counts == evaluate(m, b, MaskAssignment.ones(m.config)).counts

    def test_counts_sum_to_size(self, data):
        r = evaluate(small_model(data), data.eval_set())
        assert sum(t for _, t in r.counts.values()) == len(data.eval_set())
        assert r.subcases == ["id", "swap", "embed-if", "prep-like"]

    def test_selectors(self):
        r = EvalReport(OrderedDict(id=(9, 10), swap=(1, 10), other=(3, 10)))
        assert r.selector("id") == 0.9
        assert r.selector("ood") == pytest.approx(0.2)
        assert r.selector("mixed") == pytest.approx(0.55)
        assert r.selector("swap") == 0.1

    def test_round_trip_bit_identical(self, data, tmp_path):
        m = small_model(data)
        res = fine_tune(m, data, train_cfg(total_steps=4))
        persist.save_checkpoint(tmp_path, res.checkpoints[-1])
        back = persist.load_checkpoint(tmp_path).model(m.config)
        b = data.eval_set()
        assert predict(back, b).tobytes() == predict(m, b).tobytes()


class TestProperties:
    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(0, 1), min_size=1, max_size=30), st.integers(0, 1000))
    def test_accuracy_in_unit_interval(self, labels, seed):
        rng = np.random.default_rng(seed)
        n = len(labels)
        logits = rng.normal(size=(n, 2))
        subs = tuple(rng.choice(["id", "swap"], size=n))
        b = PairBatch(np.ones((n, 3), np.int64), np.zeros((n, 3), np.int64),
                      np.ones((n, 3), bool), np.array(labels), subs)
        r = evaluate(None, b, logits=logits)
        assert all(0.0 <= r.accuracy(s) <= 1.0 for s in r.subcases)
        assert sum(t for _, t in r.counts.values()) == n
