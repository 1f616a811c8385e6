import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from subnetlab import taskgen as TG
from subnetlab.taskgen import (ENTAIL, IF, NON_ENTAIL, Example, IngestionError, SchemaError,
                               TaskSpec, encode, generate_task, label_pair, overlap)


@pytest.fixture(scope="module")
def bundle():
    return generate_task(TaskSpec())


def heuristic_accuracy(examples):
    pred = [int(overlap(e.premise, e.hypothesis) >= 0.8) for e in examples]
    return float(np.mean([p == e.label for p, e in zip(pred, examples)]))


class TestVocabulary:
    def test_layout(self):
        v = TaskSpec(n_entities=5, n_verbs=2, n_fillers=5).vocabulary()
        assert v[:4] == list(TG.SPECIALS)
        assert v[4:] == ["e0", "e1", "e2", "e3", "e4", "v0", "v1", "f0", "f1", "f2", "f3", "f4"]
        assert len(set(v)) == len(v)

    def test_max_length_covers_every_example(self, bundle):
        width = TaskSpec().max_length()
        lengths = [len(e.premise) + len(e.hypothesis) + 3
                   for part in bundle.splits().values() for e in part]
        assert max(lengths) <= width


class TestLabeler:
    def test_main_clause_match(self):
        assert label_pair(("f0", "e1", "v2", "e3"), ("e1", "v2", "e3")) == ENTAIL

    def test_prepositional_phrase_skipped(self):
        prem = ("e1", "f4", "e5", "v0", "e2")
        assert label_pair(prem, ("e1", "v0", "e2")) == ENTAIL
        assert label_pair(prem, ("e5", "v0", "e2")) == NON_ENTAIL

    def test_governing_if(self):
        assert label_pair((IF, "e1", "v0", "e2"), ("e1", "v0", "e2")) == NON_ENTAIL

    def test_trailing_if_is_a_distractor(self):
        assert label_pair(("e1", "v0", "e2", "f1", IF), ("e1", "v0", "e2")) == ENTAIL

    def test_swap(self):
        assert label_pair(("e1", "v0", "e2"), ("e2", "v0", "e1")) == NON_ENTAIL

    def test_overlap(self):
        assert overlap(("e1", "v0", "e2"), ("e2", "v0", "e7")) == pytest.approx(2 / 3)
        assert overlap(("e1",), ()) == 0.0


class TestGenerate:
    def test_deterministic(self, tmp_path):
        spec = TaskSpec(n_train=300, n_val=50, n_ood=40, seed=3)
        a, b = tmp_path / "a", tmp_path / "b"
        TG.save_bundle(a, generate_task(spec))
        TG.save_bundle(b, generate_task(spec))
        for f in sorted(a.iterdir()):
            assert f.read_bytes() == (b / f.name).read_bytes()

    def test_seed_changes_data(self):
        a = generate_task(TaskSpec(n_train=50, n_val=10, n_ood=10, seed=0))
        b = generate_task(TaskSpec(n_train=50, n_val=10, n_ood=10, seed=1))
        assert a.train != b.train

    def test_split_names(self, bundle):
        assert list(bundle.splits()) == ["train", "id_val", "ood_swap", "ood_embed-if",
                                         "ood_prep-like"]
        assert [len(bundle.ood[k]) for k in TG.OOD_SUBCASES] == [500] * 3

    def test_ood_is_full_overlap_non_entailment(self, bundle):
        for name, part in bundle.ood.items():
            for e in part:
                assert overlap(e.premise, e.hypothesis) == 1.0
                assert e.label == NON_ENTAIL and e.subcase == name

    def test_train_label_balance(self, bundle):
        assert 0.48 <= np.mean([e.label for e in bundle.train]) <= 0.52

    def test_heuristic_classifier(self, bundle):
        p = TaskSpec().heuristic_purity
        assert heuristic_accuracy(bundle.train) >= p - 0.02
        for part in bundle.ood.values():
            assert heuristic_accuracy(part) <= 0.02

    def test_relabel_reproduces_stored_labels(self, bundle):
        for part in bundle.splits().values():
            assert all(label_pair(e.premise, e.hypothesis) == e.label for e in part)

    def test_fillers_not_repeated_within_premise(self, bundle):
        for e in bundle.train[:2000]:
            fillers = [t for t in e.premise if t.startswith("f")]
            assert len(fillers) == len(set(fillers))

    @pytest.mark.parametrize("kw", [dict(n_entities=4), dict(heuristic_purity=0.5),
                                    dict(n_train=0), dict(n_fillers=4)])
    def test_invalid_spec(self, kw):
        with pytest.raises(ValueError):
            generate_task(TaskSpec(**kw))

    def test_vocabulary_too_small(self):
        spec = TaskSpec(n_entities=5, n_verbs=1, n_fillers=5, n_train=90, n_val=20)
        with pytest.raises(ValueError, match="vocabulary too small"):
            generate_task(spec)


class TestEncode:
    def test_layout_and_segments(self):
        vocab = TaskSpec(n_entities=5, n_verbs=2, n_fillers=5).vocabulary()
        ex = Example(("e0", "v1", "e2"), ("e0", "v1", "e2"), ENTAIL)
        b = encode([ex], vocab, width=10)
        idx = {t: i for i, t in enumerate(vocab)}
        toks = ["[CLS]", "e0", "v1", "e2", "[SEP]", "e0", "v1", "e2", "[SEP]"]
        assert b.token_ids[0, :9].tolist() == [idx[t] for t in toks]
        assert b.token_ids[0, 9] == idx["[PAD]"]
        assert b.segment_ids[0].tolist() == [0] * 5 + [1] * 4 + [0]
        assert b.valid[0].tolist() == [True] * 9 + [False]
        assert b.labels.tolist() == [1]

    def test_too_wide(self):
        vocab = TaskSpec().vocabulary()
        with pytest.raises(ValueError, match="example 0"):
            encode([Example(("e0", "v0", "e1"), ("e0",), 0)], vocab, width=4)


class TestFiles:
    def test_bundle_round_trip(self, tmp_path, bundle):
        small = TG.DatasetBundle(bundle.vocab, bundle.train[:200], bundle.id_val[:50],
                                 {k: v[:20] for k, v in bundle.ood.items()})
        TG.save_bundle(tmp_path, small)
        back = TG.load_bundle(tmp_path)
        assert back == small
        assert not list(tmp_path.glob("*.tmp"))

    def test_empty_file_warns(self, tmp_path, caplog):
        p = tmp_path / "empty.jsonl"
        p.write_text("")
        with caplog.at_level(logging.WARNING):
            assert TG.load_jsonl(p, TaskSpec().vocabulary()) == []
        assert "no examples" in caplog.text

    def _write(self, tmp_path, records):
        p = tmp_path / "split.jsonl"
        p.write_text("".join(json.dumps(r) + "\n" for r in records))
        return p

    def test_label_two_is_schema_error_at_line(self, tmp_path):
        ok = dict(premise=["e0", "v0", "e1"], hypothesis=["e0", "v0", "e1"], label=1, subcase="id")
        p = self._write(tmp_path, [ok, dict(ok, label=2)])
        with pytest.raises(SchemaError, match=":2: label"):
            TG.load_jsonl(p, TaskSpec().vocabulary())

    def test_missing_field(self, tmp_path):
        p = self._write(tmp_path, [dict(premise=["e0"], hypothesis=["e0"], label=0)])
        with pytest.raises(SchemaError, match="subcase"):
            TG.load_jsonl(p, TaskSpec().vocabulary())

    def test_malformed_json(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text("{not json\n")
        with pytest.raises(SchemaError, match=":1:"):
            TG.load_jsonl(p, TaskSpec().vocabulary())

    def test_unknown_token_listed(self, tmp_path):
        p = self._write(tmp_path, [dict(premise=["e0", "zz9"], hypothesis=["e0"], label=0,
                                        subcase="id")])
        with pytest.raises(IngestionError, match="zz9"):
            TG.load_jsonl(p, TaskSpec().vocabulary())


class TestProperties:
    tokens = st.sampled_from(["e0", "e1", "e2", "v0", "v1", "f0", IF])

    @settings(max_examples=200, deadline=None)
    @given(st.lists(tokens, max_size=8), st.lists(tokens, max_size=4))
    def test_labeler_is_pure_and_binary(self, prem, hyp):
        a = label_pair(prem, hyp)
        assert a == label_pair(list(prem), tuple(hyp)) and a in (0, 1)
        if a == ENTAIL:
            assert overlap(prem, hyp) == 1.0

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_generated_labels_match_labeler(self, seed):
        b = generate_task(TaskSpec(n_train=40, n_val=10, n_ood=5, seed=seed))
        for part in b.splits().values():
            assert all(label_pair(e.premise, e.hypothesis) == e.label for e in part)
