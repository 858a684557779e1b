"""Corpus generator: target rules, oracles, round trips, determinism."""

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vtcomp import vocab
from vtcomp.data import (
    CorpusSpec,
    Sample,
    count_cot_target,
    count_target,
    gen_corpus,
    read_jsonl,
    region_target,
    sample_from_dict,
    sample_to_dict,
    sum_row_cot_target,
    sum_row_target,
    transcribe_target,
    write_jsonl,
)


def test_vocab_round_trip():
    ids = vocab.encode("sum r3 cot")
    assert vocab.decode(ids) == "sum r3 cot"
    ids = vocab.encode("region r2 c1 r3 c4")
    assert vocab.decode(ids) == "region r2 c1 r3 c4"


def test_vocab_digit_expansion():
    assert vocab.encode("42") == [vocab.digit_token(4), vocab.digit_token(2)]
    assert vocab.encode("3 7 2 = 12") == [
        vocab.digit_token(3), vocab.digit_token(7), vocab.digit_token(2),
        vocab.keyword_token("="), vocab.digit_token(1), vocab.digit_token(2),
    ]


def test_vocab_rejects_unknown_word():
    with pytest.raises(ValueError):
        vocab.encode("banana")


def test_transcribe_single_cell():
    assert transcribe_target(np.array([[7]])) == "7"


def test_transcribe_row_major():
    assert transcribe_target(np.array([[1, 2], [3, 4]])) == "1 2 3 4"


def test_region_rule():
    grid = np.arange(16).reshape(4, 4) % 10
    assert region_target(grid, 1, 1, 2, 2) == "5 6 9 0"


def test_count_three_fives():
    grid = np.array([[5, 1], [5, 5], [2, 3]])
    assert count_target(grid, 5) == "3"
    assert count_cot_target(grid, 5) == "5 5 5 = 3"
    assert count_cot_target(grid, 9) == "= 0"


def test_sum_row_rule():
    grid = np.array([[3, 7, 2], [1, 1, 1]])
    assert sum_row_target(grid, 0) == "12"
    assert sum_row_cot_target(grid, 0) == "3 7 2 = 12"


@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_transcribe_round_trip(h, w, seed):
    """transcribe targets reconstruct the grid exactly."""
    rng = np.random.Generator(np.random.PCG64(seed))
    grid = rng.integers(0, 10, size=(h, w))
    rebuilt = np.array([int(tok) for tok in transcribe_target(grid).split()]).reshape(h, w)
    assert (rebuilt == grid).all()


@given(st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_reasoning_targets_match_independent_oracle(seed):
    spec = CorpusSpec(
        n_samples=40,
        grid_h=4,
        grid_w=4,
        task_mix={"count_glyph": 0.5, "sum_digits": 0.5},
        seed=seed,
    )
    for s in gen_corpus(spec):
        grid = s.x_v.as_array()
        words = s.x_t.split()
        if s.task_tag == "count_glyph":
            g = int(words[1])
            expected = sum(1 for v in grid.reshape(-1) if int(v) == g)
        else:
            row = int(words[1].removeprefix("r"))
            expected = sum(int(v) for v in grid[row])
        assert s.y == str(expected)


def test_gen_corpus_deterministic_bytes(tmp_path):
    spec = CorpusSpec(n_samples=200, seed=42)
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_jsonl(gen_corpus(spec), a)
    write_jsonl(gen_corpus(CorpusSpec(n_samples=200, seed=42)), b)
    assert a.read_bytes() == b.read_bytes()


def test_gen_corpus_respects_mix_and_tags():
    spec = CorpusSpec(n_samples=500, seed=3)
    samples = gen_corpus(spec)
    tags = {s.task_tag for s in samples}
    assert tags <= set(spec.task_mix)
    for s in samples:
        assert s.is_generation_task == s.task_tag.startswith("transcribe")


def test_jsonl_round_trip(tmp_path):
    samples = gen_corpus(CorpusSpec(n_samples=50, seed=9))
    samples[0].meta.update(r_cot="5 5", r_ans="2", gold="2")
    path = tmp_path / "x.jsonl"
    write_jsonl(samples, path)
    back = read_jsonl(path)
    assert len(back) == len(samples)
    assert back[0].meta["r_cot"] == "5 5"
    for s1, s2 in zip(samples, back):
        assert s1.x_v == s2.x_v
        assert (s1.x_t, s1.y, s1.task_tag) == (s2.x_t, s2.y, s2.task_tag)
    # rs fields live at the record top level on disk
    first = json.loads(path.read_text().splitlines()[0])
    assert first["r_cot"] == "5 5" and "r_cot" not in first["meta"]


def test_sample_dict_round_trip():
    samples = gen_corpus(CorpusSpec(n_samples=5, seed=1))
    for s in samples:
        back = sample_from_dict(sample_to_dict(s))
        assert back == s


def test_instruction_padding():
    s = gen_corpus(CorpusSpec(n_samples=30, seed=4))[0]
    ids = s.instruction_ids()
    assert len(ids) == 6
    assert all(i == vocab.PAD for i in ids[len(vocab.encode(s.x_t)):])


def test_bad_mix_rejected():
    with pytest.raises(ValueError):
        gen_corpus(CorpusSpec(n_samples=1, task_mix={"transcribe": 0.5}))
    with pytest.raises(ValueError):
        gen_corpus(CorpusSpec(n_samples=1, task_mix={"bogus": 1.0}))
    with pytest.raises(ValueError):
        gen_corpus(CorpusSpec(n_samples=1, alphabet_size=11))
