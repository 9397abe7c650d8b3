"""Synthetic chain-arithmetic tasks, the closed vocabulary, and sequence segmentation.

A task defines a chain of variables in the prompt (``a=3. b=a+2. c=b-4. What is c?``).
The reference chain of thought unrolls the chain into one signed-sum expression
(``c=3+2-4``) and scatters distractor items (unused-variable statements and filler
words) between its pieces. Every token of the expression is needed to derive the
answer; no distractor token is.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
DELIMITER = "####"

CHAIN_VARS = tuple("abcdefgh")
DISTRACTOR_VARS = tuple("kmuvwxyz")
FILLER_WORDS = ("so", "then", "we", "now", "note", "ok", "the", "thus", "well", "next")
QUESTION_WORDS = ("What", "is")
OPERATORS = ("+", "-", "=", "×")
CLASSES = ("number", "symbol", "filler", "word", "structural")

MAX_VALUE = 99


class TaskError(ValueError):
    pass


class TokenizeError(TaskError):
    pass


def _default_symbols() -> list[tuple[str, str]]:
    table = [(s, "structural") for s in (PAD, BOS, EOS, DELIMITER, ".", "?", " ")]
    table += [(str(d), "number") for d in range(10)]
    table += [(s, "symbol") for s in OPERATORS]
    table += [(v, "word") for v in CHAIN_VARS + DISTRACTOR_VARS + QUESTION_WORDS]
    table += [(w, "filler") for w in FILLER_WORDS]
    return table


class Vocabulary:
    """Bijective symbol/id table with one class per token.

    Tokenization is greedy longest-match over the symbol table, so ``"so"`` is the
    filler word and never the two letters.
    """

    def __init__(self, table: Sequence[tuple[str, str]] | None = None):
        table = list(table if table is not None else _default_symbols())
        self.symbols = [s for s, _ in table]
        self.classes = [c for _, c in table]
        if len(set(self.symbols)) != len(self.symbols):
            raise TaskError("duplicate symbols in vocabulary")
        bad = set(self.classes) - set(CLASSES)
        if bad:
            raise TaskError(f"unknown token classes {sorted(bad)}")
        self.index = {s: i for i, s in enumerate(self.symbols)}
        # specials never appear in running text
        self._matchable = sorted(
            (s for s in self.symbols if s not in (PAD, BOS, EOS)), key=len, reverse=True
        )

    def __len__(self) -> int:
        return len(self.symbols)

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def bos_id(self) -> int:
        return self.index[BOS]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    @property
    def delimiter_ids(self) -> tuple[int, ...]:
        return (self.index[DELIMITER],)

    @property
    def delimiter_id(self) -> int:
        return self.index[DELIMITER]

    @property
    def question_end_id(self) -> int:
        return self.index["?"]

    def token_class(self, token_id: int) -> str:
        return self.classes[token_id]

    def tokenize(self, text: str) -> list[int]:
        ids = []
        i = 0
        while i < len(text):
            for sym in self._matchable:
                if text.startswith(sym, i):
                    ids.append(self.index[sym])
                    i += len(sym)
                    break
            else:
                raise TokenizeError(f"unknown symbol {text[i]!r} at offset {i} in {text!r}")
        return ids

    def detokenize(self, ids: Iterable[int]) -> str:
        return "".join(self.symbols[i] for i in ids)

    def save(self, path: str | Path) -> None:
        lines = [f"{s}\t{c}" for s, c in zip(self.symbols, self.classes)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        table = []
        for line in Path(path).read_text(encoding="utf-8").split("\n"):
            if line:
                sym, cls_ = line.rsplit("\t", 1)
                table.append((sym, cls_))
        return cls(table)


VOCAB = Vocabulary()


@dataclass(frozen=True)
class TaskInstance:
    prompt: str
    gold_answer: str
    gold_cot: str
    salient_positions: tuple[int, ...]  # indices into tokenize(gold_cot)
    difficulty: int
    seed: int
    n_distractors: int = 0

    @property
    def asked_var(self) -> str:
        return self.prompt.rstrip("?").split()[-1]

    def to_json(self) -> str:
        rec = asdict(self)
        rec["salient_positions"] = list(self.salient_positions)
        return json.dumps(rec, sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "TaskInstance":
        rec = json.loads(line)
        rec["salient_positions"] = tuple(rec["salient_positions"])
        return cls(**rec)

    def prompt_ids(self, vocab: Vocabulary = VOCAB) -> list[int]:
        return [vocab.bos_id] + vocab.tokenize(self.prompt)

    def answer_ids(self, vocab: Vocabulary = VOCAB) -> list[int]:
        return vocab.tokenize(self.gold_answer)

    def full_ids(self, vocab: Vocabulary = VOCAB) -> list[int]:
        """BOS prompt CoT #### answer EOS -- the supervised target sequence."""
        return (
            self.prompt_ids(vocab)
            + vocab.tokenize(self.gold_cot)
            + list(vocab.delimiter_ids)
            + self.answer_ids(vocab)
            + [vocab.eos_id]
        )


# -- answer handling -------------------------------------------------------------

_TRAILING_PUNCT = ".,;:!?"


def canonical_answer(text: str | None) -> str:
    if text is None:
        return ""
    return text.strip().rstrip(_TRAILING_PUNCT).strip()


def answers_match(extracted: str | None, gold: str) -> bool:
    """Exact match after canonicalization; integers compare by value when both parse."""
    a, b = canonical_answer(extracted), canonical_answer(gold)
    if not a:
        return False
    if a == b:
        return True
    try:
        return int(a) == int(b)
    except ValueError:
        return False


# -- deriving answers from a chain of thought ------------------------------------

def derive_answer_from_cot(cot_ids: Sequence[int], asked_var: str,
                           vocab: Vocabulary = VOCAB) -> int | None:
    """Evaluate the signed-sum expression for ``asked_var`` inside a CoT.

    The expression starts at the first ``<asked_var> = <digits>``; afterwards every
    digit run immediately preceded by ``+`` or ``-`` is a term. Digit runs without a
    leading operator (distractor statements) are skipped. Returns None when no start
    term exists.
    """
    syms = [vocab.symbols[i] for i in cot_ids]
    n = len(syms)

    def digit_run(j: int) -> tuple[int, int]:
        k = j
        while k < n and syms[k].isdigit() and len(syms[k]) == 1:
            k += 1
        return (int("".join(syms[j:k])) if k > j else -1), k

    start = None
    for i in range(n - 2):
        if syms[i] == asked_var and syms[i + 1] == "=":
            value, end = digit_run(i + 2)
            if value >= 0:
                start = (value, end)
                break
    if start is None:
        return None
    total, i = start
    while i < n:
        if syms[i] in ("+", "-"):
            value, end = digit_run(i + 1)
            if value >= 0:
                total += value if syms[i] == "+" else -value
                i = end
                continue
        i += 1
    return total


def ablation_sound(cot_ids: Sequence[int], salient: set[int], asked_var: str,
                   gold: int, vocab: Vocabulary = VOCAB) -> bool:
    """Deleting any salient token breaks the derivation; deleting any other keeps it."""
    if derive_answer_from_cot(cot_ids, asked_var, vocab) != gold:
        return False
    for i in range(len(cot_ids)):
        reduced = list(cot_ids[:i]) + list(cot_ids[i + 1:])
        derivable = derive_answer_from_cot(reduced, asked_var, vocab) == gold
        if derivable == (i in salient):
            return False
    return True


# -- generation --------------------------------------------------------------------

def _distractor_item(rng: random.Random) -> str:
    if rng.random() < 0.5:
        return f" {rng.choice(DISTRACTOR_VARS)}={rng.randint(0, 9)}."
    return f" {rng.choice(FILLER_WORDS)}"


def generate_chain_arithmetic(seed: int, n_steps: int, n_distractors: int,
                              max_retries: int = 100,
                              vocab: Vocabulary = VOCAB) -> TaskInstance:
    if n_steps < 1:
        raise TaskError(f"n_steps must be >= 1, got {n_steps}")
    if n_steps > len(CHAIN_VARS):
        raise TaskError(f"n_steps must be <= {len(CHAIN_VARS)}, got {n_steps}")
    if n_distractors < 0:
        raise TaskError(f"n_distractors must be >= 0, got {n_distractors}")
    rng = random.Random(seed)
    for _ in range(max_retries):
        names = rng.sample(CHAIN_VARS, n_steps)
        value = rng.randint(1, 9)
        values = [value]
        terms = []
        ok = True
        for _step in range(n_steps - 1):
            op = rng.choice("+-")
            k = rng.randint(1, 9)
            value = value + k if op == "+" else value - k
            if not 0 <= value <= MAX_VALUE:
                ok = False
                break
            terms.append((op, k))
            values.append(value)
        if not ok:
            continue

        statements = [f"{names[0]}={values[0]}."]
        for i, (op, k) in enumerate(terms, start=1):
            statements.append(f"{names[i]}={names[i - 1]}{op}{k}.")
        asked = names[-1]
        prompt = " ".join(statements) + f" What is {asked}?"

        pieces = [f"{asked}={values[0]}"] + [f"{op}{k}" for op, k in terms]
        slots: list[list[str]] = [[] for _ in range(len(pieces) + 1)]
        for _d in range(n_distractors):
            slots[rng.randint(0, len(pieces))].append(_distractor_item(rng))

        cot_ids: list[int] = []
        salient: set[int] = set()
        for i in range(len(pieces) + 1):
            for item in slots[i]:
                cot_ids += vocab.tokenize(item)
            if i < len(pieces):
                piece = vocab.tokenize(pieces[i])
                salient.update(range(len(cot_ids), len(cot_ids) + len(piece)))
                cot_ids += piece
        if vocab.tokenize(vocab.detokenize(cot_ids)) != cot_ids:
            continue
        if not ablation_sound(cot_ids, salient, asked, value, vocab):
            continue
        return TaskInstance(
            prompt=prompt,
            gold_answer=str(value),
            gold_cot=vocab.detokenize(cot_ids),
            salient_positions=tuple(sorted(salient)),
            difficulty=n_steps,
            seed=seed,
            n_distractors=n_distractors,
        )
    raise TaskError(f"seed {seed}: no representable instance after {max_retries} retries")


def generate_copy_answer(seed: int, n_distractors: int, vocab: Vocabulary = VOCAB
                         ) -> TaskInstance:
    """``What is x?`` with a CoT of filler words around a single digit; the answer
    is that digit and the digit is the only salient token."""
    if n_distractors < 0:
        raise TaskError(f"n_distractors must be >= 0, got {n_distractors}")
    rng = random.Random(seed)
    digit = str(rng.randint(0, 9))
    items = [f" {rng.choice(FILLER_WORDS)}" for _ in range(n_distractors)]
    at = rng.randint(0, n_distractors)
    items.insert(at, f" {digit}")
    cot_ids = vocab.tokenize("".join(items))
    pos = [i for i, t in enumerate(cot_ids) if vocab.symbols[t] == digit]
    return TaskInstance(prompt=f"What is {rng.choice(DISTRACTOR_VARS)}?", gold_answer=digit,
                        gold_cot=vocab.detokenize(cot_ids), salient_positions=tuple(pos),
                        difficulty=1, seed=seed, n_distractors=n_distractors)


def counterfactual_cot(inst: TaskInstance, rng: random.Random, max_retries: int = 100,
                       vocab: Vocabulary = VOCAB) -> TaskInstance:
    """Copy of ``inst`` whose CoT expression has re-drawn digits and operators.

    The prompt is kept; the gold answer is re-derived from the altered CoT, so a
    model trained on such pairs must read the answer off the CoT, not the prompt.
    """
    ids = vocab.tokenize(inst.gold_cot)
    digits = [i for i in inst.salient_positions if vocab.symbols[ids[i]].isdigit()]
    ops = [i for i in inst.salient_positions if vocab.symbols[ids[i]] in ("+", "-")]
    for _ in range(max_retries):
        new = list(ids)
        for i in digits:
            if rng.random() < 0.5:
                new[i] = vocab.index[str(rng.randint(1, 9))]
        for i in ops:
            if rng.random() < 0.5:
                new[i] = vocab.index[rng.choice("+-")]
        value = derive_answer_from_cot(new, inst.asked_var, vocab)
        if new != ids and value is not None and 0 <= value <= MAX_VALUE:
            return TaskInstance(inst.prompt, str(value), vocab.detokenize(new),
                                inst.salient_positions, inst.difficulty, inst.seed,
                                inst.n_distractors)
    return inst


def generate_corpus(seed: int, count: int, n_steps: int, n_distractors: int,
                    vary_distractors: bool = False) -> list[TaskInstance]:
    """``count`` instances with per-instance seeds drawn from ``seed``.

    With ``vary_distractors`` each instance draws its distractor count uniformly
    from ``0..n_distractors``.
    """
    rng = random.Random(seed)
    out = []
    for _ in range(count):
        inst_seed = rng.getrandbits(48)
        nd = rng.randint(0, n_distractors) if vary_distractors else n_distractors
        out.append(generate_chain_arithmetic(inst_seed, n_steps, nd))
    return out


def supervised_examples(instances: Sequence[TaskInstance], counterfactual_frac: float,
                        seed: int, vocab: Vocabulary = VOCAB
                        ) -> tuple[list[list[int]], list[int]]:
    """Token sequences and loss-start positions for the supervised warm start.

    An ordinary instance contributes its full sequence with loss from the first CoT
    token through EOS. A ``counterfactual_frac`` share of instances is split in two
    instead: the gold CoT up to the delimiter (loss on the CoT), and a
    :func:`counterfactual_cot` copy with loss on its answer and EOS only. At 1.0 the
    prompt never predicts the answer beyond what the CoT says.
    """
    if not 0.0 <= counterfactual_frac <= 1.0:
        raise TaskError(f"counterfactual_frac must lie in [0, 1], got {counterfactual_frac}")
    rng = random.Random(seed)
    seqs, starts = [], []
    for inst in instances:
        p = len(inst.prompt_ids(vocab))
        full = inst.full_ids(vocab)
        if rng.random() >= counterfactual_frac:
            seqs.append(full)
            starts.append(p)
            continue
        seqs.append(full[:len(full) - len(inst.answer_ids(vocab)) - 1])
        starts.append(p)
        cf = counterfactual_cot(inst, rng, vocab=vocab)
        ids = cf.full_ids(vocab)
        seqs.append(ids)
        starts.append(len(ids) - len(cf.answer_ids(vocab)) - 1)
    return seqs, starts


def save_corpus(instances: Iterable[TaskInstance], path: str | Path) -> None:
    Path(path).write_text("".join(t.to_json() + "\n" for t in instances), encoding="utf-8")


def load_corpus(path: str | Path) -> list[TaskInstance]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [TaskInstance.from_json(line) for line in lines if line.strip()]


def corpus_digest(data: bytes) -> str:
    """Git blob SHA-1 of the corpus bytes."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


# -- segmentation ------------------------------------------------------------------

@dataclass(frozen=True)
class SegmentedSequence:
    """Token ids split into prompt / CoT / delimiter / answer / tail.

    ``prompt`` covers BOS through the question mark. ``tail`` holds EOS and anything
    after it. The five spans are contiguous and cover the sequence exactly.
    """

    ids: tuple[int, ...]
    prompt: range
    cot: range
    answer: range
    delimiter: int | None
    tail: range = field(default=range(0))
    multi_delimiter: bool = False

    @property
    def missing_delimiter(self) -> bool:
        return self.delimiter is None

    @property
    def cot_ids(self) -> tuple[int, ...]:
        return self.ids[self.cot.start:self.cot.stop]

    @property
    def answer_ids(self) -> tuple[int, ...]:
        return self.ids[self.answer.start:self.answer.stop]

    @property
    def prompt_ids(self) -> tuple[int, ...]:
        return self.ids[self.prompt.start:self.prompt.stop]

    def __len__(self) -> int:
        return len(self.ids)


def segment(tokens: Sequence[int], prompt_len: int | None = None,
            vocab: Vocabulary = VOCAB) -> SegmentedSequence:
    ids = tuple(int(t) for t in tokens)
    if prompt_len is None:
        try:
            prompt_len = ids.index(vocab.question_end_id) + 1
        except ValueError:
            raise TaskError("cannot locate prompt end: no '?' token") from None
    if not 0 <= prompt_len <= len(ids):
        raise TaskError(f"prompt_len {prompt_len} outside sequence of length {len(ids)}")
    try:
        end = ids.index(vocab.eos_id, prompt_len)
    except ValueError:
        end = len(ids)
    body = ids[prompt_len:end]
    delim = vocab.delimiter_id
    hits = [i for i, t in enumerate(body) if t == delim]
    if not hits:
        return SegmentedSequence(ids, range(0, prompt_len), range(prompt_len, end),
                                 range(end, end), None, range(end, len(ids)))
    d = prompt_len + hits[0]
    return SegmentedSequence(ids, range(0, prompt_len), range(prompt_len, d),
                             range(d + 1, end), d, range(end, len(ids)),
                             multi_delimiter=len(hits) > 1)


def token_classes(text: str, vocab: Vocabulary = VOCAB) -> list[str]:
    return [vocab.token_class(i) for i in vocab.tokenize(text)]

