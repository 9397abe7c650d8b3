import random
import re

import pytest
from hypothesis import given
from hypothesis import strategies as st

from atmanrl.tasks import (DELIMITER, VOCAB, TaskError, TaskInstance, TokenizeError,
                           Vocabulary, ablation_sound, answers_match, corpus_digest,
                           counterfactual_cot, derive_answer_from_cot,
                           generate_chain_arithmetic, generate_corpus, load_corpus,
                           save_corpus, segment, supervised_examples, token_classes)

STATEMENT = re.compile(r"([a-h])=(?:(\d+)|([a-h])([+\-])(\d+))\.")


def evaluate_prompt(prompt: str) -> int:
    """Walk the prompt's dependency graph; independent of the CoT and the generator."""
    env = {}
    for var, const, src, op, k in STATEMENT.findall(prompt):
        env[var] = int(const) if const else env[src] + (int(k) if op == "+" else -int(k))
    asked = re.search(r"What is ([a-h])\?$", prompt).group(1)
    return env[asked]


def test_vocabulary_is_bijective_and_classed(tmp_path):
    assert len(set(VOCAB.symbols)) == len(VOCAB)
    assert all(c in ("number", "symbol", "filler", "word", "structural") for c in VOCAB.classes)
    assert VOCAB.tokenize(DELIMITER) == list(VOCAB.delimiter_ids)
    path = tmp_path / "vocab.txt"
    VOCAB.save(path)
    again = Vocabulary.load(path)
    assert again.symbols == VOCAB.symbols and again.classes == VOCAB.classes


def test_tokenizer_errors_name_the_character():
    with pytest.raises(TokenizeError, match="'Q'"):
        VOCAB.tokenize("a=Q")


def test_longest_match_prefers_filler_words():
    assert VOCAB.detokenize(VOCAB.tokenize(" so")) == " so"
    assert len(VOCAB.tokenize(" so")) == 2


def test_class_tagging():
    assert token_classes("b=a+2") == ["word", "symbol", "word", "symbol", "number"]


def test_degenerate_chain():
    inst = generate_chain_arithmetic(0, 1, 0)
    assert re.fullmatch(r"[a-h]=\d\. What is [a-h]\?", inst.prompt)
    cot = VOCAB.tokenize(inst.gold_cot)
    assert inst.gold_answer == inst.prompt[2]
    assert set(inst.salient_positions) == set(range(len(cot)))


def test_no_distractors_means_everything_non_filler_is_salient():
    for seed in range(20):
        inst = generate_chain_arithmetic(seed, 3, 0)
        cot = VOCAB.tokenize(inst.gold_cot)
        non_filler = {i for i, t in enumerate(cot) if VOCAB.token_class(t) != "filler"}
        assert set(inst.salient_positions) == non_filler


def test_thousand_seeds_against_independent_evaluator():
    for seed in range(1000):
        n_steps = 1 + seed % 5
        inst = generate_chain_arithmetic(seed, n_steps, seed % 7)
        assert int(inst.gold_answer) == evaluate_prompt(inst.prompt)
        cot = VOCAB.tokenize(inst.gold_cot)
        assert derive_answer_from_cot(cot, inst.asked_var) == int(inst.gold_answer)
        assert inst.salient_positions
        assert VOCAB.detokenize(cot) == inst.gold_cot


def test_ablation_soundness_per_instance():
    for seed in range(50):
        inst = generate_chain_arithmetic(seed, 3, 5)
        cot = VOCAB.tokenize(inst.gold_cot)
        assert ablation_sound(cot, set(inst.salient_positions), inst.asked_var,
                              int(inst.gold_answer))
        # and the check is not vacuous: a wrong salient set is rejected
        wrong = set(inst.salient_positions) - {inst.salient_positions[-1]}
        assert not ablation_sound(cot, wrong, inst.asked_var, int(inst.gold_answer))


def test_same_seed_same_instance_and_argument_checks():
    assert generate_chain_arithmetic(42, 3, 5) == generate_chain_arithmetic(42, 3, 5)
    for bad in ((0, 1), (3, -1), (9, 0)):
        with pytest.raises(TaskError):
            generate_chain_arithmetic(0, *bad)


def test_bounded_retries_raise():
    with pytest.raises(TaskError, match="retries"):
        generate_chain_arithmetic(0, 8, 0, max_retries=0)


def test_corpus_roundtrip_and_digest(tmp_path):
    tasks = generate_corpus(3, 20, 3, 5)
    path = tmp_path / "c.jsonl"
    save_corpus(tasks, path)
    assert load_corpus(path) == tasks
    assert corpus_digest(path.read_bytes()) == corpus_digest(path.read_bytes())
    assert TaskInstance.from_json(tasks[0].to_json()) == tasks[0]
    line = path.read_text().splitlines()[0]
    for key in ("prompt", "gold_answer", "gold_cot", "salient_positions", "difficulty", "seed"):
        assert f'"{key}"' in line


def test_corpus_digest_is_git_blob_sha():
    assert corpus_digest(b"") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391"


def test_segment_constructive():
    inst = generate_chain_arithmetic(5, 3, 2)
    ids = inst.full_ids()
    seq = segment(ids)
    assert seq.prompt == range(0, len(inst.prompt_ids()))
    assert VOCAB.detokenize(seq.cot_ids) == inst.gold_cot
    assert VOCAB.detokenize(seq.answer_ids) == inst.gold_answer
    assert seq.delimiter == seq.cot.stop == seq.answer.start - 1
    assert not seq.multi_delimiter and not seq.missing_delimiter
    assert list(seq.tail) == [len(ids) - 1]


def test_segment_without_and_with_extra_delimiters():
    inst = generate_chain_arithmetic(6, 2, 1)
    p = inst.prompt_ids()
    cot = VOCAB.tokenize(inst.gold_cot)
    seq = segment(p + cot)
    assert seq.missing_delimiter and len(seq.answer) == 0 and seq.cot_ids == tuple(cot)
    d = VOCAB.delimiter_id
    seq = segment(p + cot + [d, VOCAB.index["4"], d, VOCAB.index["5"]])
    assert seq.multi_delimiter and seq.delimiter == len(p) + len(cot)
    with pytest.raises(TaskError):
        segment(p, prompt_len=len(p) + 1)


def test_segment_roundtrip_fuzz():
    for seed in range(1000):
        inst = generate_chain_arithmetic(seed, 1 + seed % 4, seed % 6)
        text = inst.prompt + inst.gold_cot + DELIMITER + inst.gold_answer
        ids = [VOCAB.bos_id] + VOCAB.tokenize(text)
        seq = segment(ids)
        spans = [seq.prompt, seq.cot, range(seq.delimiter, seq.delimiter + 1), seq.answer]
        assert [i for s in spans for i in s] == list(range(len(ids)))
        parts = [VOCAB.detokenize(ids[s.start:s.stop]) for s in spans]
        assert parts == ["<bos>" + inst.prompt, inst.gold_cot, DELIMITER, inst.gold_answer]


@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(0, 6))
def test_generated_texts_roundtrip(seed, steps, distractors):
    inst = generate_chain_arithmetic(seed, steps, distractors)
    for text in (inst.prompt, inst.gold_cot, inst.gold_answer):
        assert VOCAB.detokenize(VOCAB.tokenize(text)) == text


def test_answer_matching():
    assert answers_match(" 12.", "12")
    assert answers_match("012", "12")
    assert not answers_match(None, "3")
    assert not answers_match("", "3")
    assert not answers_match("3+1", "4")


def test_counterfactual_cot_keeps_prompt_and_rederives_answer():
    rng = random.Random(0)
    changed = 0
    for seed in range(200):
        inst = generate_chain_arithmetic(seed, 3, 4)
        cf = counterfactual_cot(inst, rng)
        assert cf.prompt == inst.prompt and cf.salient_positions == inst.salient_positions
        cot = VOCAB.tokenize(cf.gold_cot)
        assert derive_answer_from_cot(cot, cf.asked_var) == int(cf.gold_answer)
        assert 0 <= int(cf.gold_answer) <= 99
        changed += cf.gold_cot != inst.gold_cot
    assert changed > 190


def test_supervised_examples_layout():
    tasks = generate_corpus(1, 30, 3, 5)
    seqs, starts = supervised_examples(tasks, 1.0, seed=0)
    assert len(seqs) == 2 * len(tasks)
    for inst, (cot_seq, ans_seq), (s0, s1) in zip(tasks, zip(seqs[::2], seqs[1::2]),
                                                  zip(starts[::2], starts[1::2])):
        p = len(inst.prompt_ids())
        assert s0 == p and cot_seq[-1] == VOCAB.delimiter_id
        assert cot_seq == inst.full_ids()[:len(cot_seq)]
        assert ans_seq[-1] == VOCAB.eos_id and ans_seq[s1 - 1] == VOCAB.delimiter_id
    plain, plain_starts = supervised_examples(tasks, 0.0, seed=0)
    assert plain == [t.full_ids() for t in tasks]
    assert plain_starts == [len(t.prompt_ids()) for t in tasks]
    mixed, _ = supervised_examples(tasks, 0.5, seed=0)
    assert len(tasks) < len(mixed) < 2 * len(tasks)
    with pytest.raises(TaskError):
        supervised_examples(tasks, 1.5, seed=0)
