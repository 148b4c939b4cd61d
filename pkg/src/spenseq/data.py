"""Corpus handling: vocabularies, CoNLL files, BIOES conversion, pretrained
embeddings, and a synthetic HMM corpus generator for controlled experiments."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .container import TAG_DATASET, read_container, write_container

UNK_TOKEN = "<unk>"
PAD_TOKEN = "<pad>"

_BIO_RE = re.compile(r"^[BI]-(.+)$")
_BIOES_RE = re.compile(r"^[BIES]-(.+)$")


@dataclass(frozen=True)
class Vocabulary:
    """Token inventory with reserved unknown/padding entries at indices 0/1."""

    index_to_token: tuple[str, ...]
    token_to_index: dict[str, int] = field(repr=False)
    lowercase: bool = False

    unk_index = 0
    pad_index = 1

    @classmethod
    def build(cls, tokens: Iterable[str], lowercase: bool = False) -> "Vocabulary":
        inventory = [UNK_TOKEN, PAD_TOKEN]
        seen = set(inventory)
        for tok in tokens:
            if lowercase:
                tok = tok.lower()
            if tok not in seen:
                seen.add(tok)
                inventory.append(tok)
        idx = tuple(inventory)
        return cls(index_to_token=idx, token_to_index={t: i for i, t in enumerate(idx)},
                   lowercase=lowercase)

    @property
    def size(self) -> int:
        return len(self.index_to_token)

    def lookup(self, token: str) -> int:
        if self.lowercase:
            token = token.lower()
        return self.token_to_index.get(token, self.unk_index)


@dataclass(frozen=True)
class LabelSet:
    """Output label inventory. Two extra indices past the labels are reserved
    for the start/end symbols of label language models and never appear in
    gold data."""

    labels: tuple[str, ...]
    label_to_index: dict[str, int] = field(repr=False)
    scheme: str = "plain"  # "plain" | "bioes"

    @classmethod
    def build(cls, labels: Iterable[str]) -> "LabelSet":
        inventory = tuple(sorted(set(labels)))
        if not inventory:
            raise ValueError("empty label inventory")
        scheme = "bioes" if all(l == "O" or _BIOES_RE.match(l) for l in inventory) else "plain"
        return cls(labels=inventory, label_to_index={l: i for i, l in enumerate(inventory)},
                   scheme=scheme)

    @property
    def size(self) -> int:
        return len(self.labels)

    @property
    def start_index(self) -> int:
        return self.size

    @property
    def end_index(self) -> int:
        return self.size + 1

    def index(self, label: str) -> int:
        try:
            return self.label_to_index[label]
        except KeyError:
            raise ValueError(f"label {label!r} is not in the label set") from None

    def name(self, index: int) -> str:
        return self.labels[index]


@dataclass(frozen=True)
class Example:
    """One sentence: token indices and aligned gold label indices."""

    tokens: tuple[int, ...]
    gold: tuple[int, ...]

    def __post_init__(self):
        if len(self.tokens) == 0:
            raise ValueError("example must contain at least one token")
        if len(self.tokens) != len(self.gold):
            raise ValueError(f"token/label length mismatch: {len(self.tokens)} vs {len(self.gold)}")

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class Dataset:
    examples: tuple[Example, ...]
    vocab: Vocabulary
    labels: LabelSet

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)


def one_hot(gold: Sequence[int], n_labels: int) -> np.ndarray:
    """(T, L) float64 one-hot rows for a gold label index sequence."""
    idx = np.asarray(gold, dtype=np.intp)
    if idx.size == 0:
        raise ValueError("empty label sequence")
    if idx.min() < 0 or idx.max() >= n_labels:
        raise ValueError(f"label index out of range for {n_labels} labels")
    out = np.zeros((idx.size, n_labels))
    out[np.arange(idx.size), idx] = 1.0
    return out


# ---------------------------------------------------------------------------
# CoNLL column format
# ---------------------------------------------------------------------------

def read_conll_sentences(path: str, token_column: int, label_column: int,
                         ) -> list[tuple[list[str], list[str]]]:
    """Raw sentences as (token strings, label strings). Blank lines separate
    sentences; ``-DOCSTART-`` lines are skipped; ragged rows are an error."""
    need = max(token_column, label_column) + 1
    sentences: list[tuple[list[str], list[str]]] = []
    toks: list[str] = []
    labs: list[str] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                if toks:
                    sentences.append((toks, labs))
                    toks, labs = [], []
                continue
            fields = line.split()
            if fields[0] == "-DOCSTART-":
                continue
            if len(fields) < need:
                raise ValueError(f"{path}:{lineno}: expected at least {need} columns, got {len(fields)}")
            toks.append(fields[token_column])
            labs.append(fields[label_column])
    if toks:
        sentences.append((toks, labs))
    if not sentences:
        raise ValueError(f"{path}: no sentences found")
    return sentences


def load_conll(path: str, token_column: int = 0, label_column: int = 1,
               vocab: Vocabulary | None = None, labels: LabelSet | None = None,
               lowercase: bool = False, bioes: bool = False) -> Dataset:
    """Load a CoNLL-style column file into an encoded Dataset.

    When ``vocab``/``labels`` are given (dev/test splits) they are reused and
    out-of-vocabulary tokens map to the unknown index; an unseen gold label is
    an error. With ``bioes`` the label column is converted from BIO first.
    """
    sentences = read_conll_sentences(path, token_column, label_column)
    if bioes:
        converted = []
        for toks, labs in sentences:
            new_labs, _ = to_bioes(labs)
            converted.append((toks, new_labs))
        sentences = converted
    if vocab is None:
        vocab = Vocabulary.build((t for toks, _ in sentences for t in toks), lowercase=lowercase)
    if labels is None:
        labels = LabelSet.build(l for _, labs in sentences for l in labs)
    examples = []
    for toks, labs in sentences:
        try:
            gold = tuple(labels.index(l) for l in labs)
        except ValueError as e:
            raise ValueError(f"{path}: {e}") from None
        examples.append(Example(tokens=tuple(vocab.lookup(t) for t in toks), gold=gold))
    return Dataset(examples=tuple(examples), vocab=vocab, labels=labels)


# ---------------------------------------------------------------------------
# BIO -> BIOES
# ---------------------------------------------------------------------------

def bio_spans(labels: Sequence[str]) -> tuple[list[tuple[int, int, str]], int]:
    """Spans (start, end inclusive, type) from BIO labels, with the leniency
    repair: a continuation with no compatible open span is treated as a span
    begin. Returns the spans and the number of repairs applied."""
    spans: list[tuple[int, int, str]] = []
    repairs = 0
    open_start, open_type = None, None

    def close(end):
        nonlocal open_start, open_type
        if open_start is not None:
            spans.append((open_start, end, open_type))
            open_start, open_type = None, None

    for i, lab in enumerate(labels):
        if lab == "O":
            close(i - 1)
            continue
        m = _BIO_RE.match(lab)
        if not m:
            raise ValueError(f"label {lab!r} is not BIO (want O, B-<type> or I-<type>)")
        kind, typ = lab[0], m.group(1)
        if kind == "B":
            close(i - 1)
            open_start, open_type = i, typ
        else:  # I-
            if open_type == typ:
                continue
            repairs += 1
            close(i - 1)
            open_start, open_type = i, typ
    close(len(labels) - 1)
    return spans, repairs


def render_bioes(length: int, spans: Sequence[tuple[int, int, str]]) -> list[str]:
    out = ["O"] * length
    for start, end, typ in spans:
        if start == end:
            out[start] = f"S-{typ}"
        else:
            out[start] = f"B-{typ}"
            for i in range(start + 1, end):
                out[i] = f"I-{typ}"
            out[end] = f"E-{typ}"
    return out


def to_bioes(labels: Sequence[str]) -> tuple[list[str], int]:
    """Convert BIO labels to BIOES. Malformed continuations are repaired as
    span begins; the repair count is returned alongside the labels."""
    spans, repairs = bio_spans(labels)
    return render_bioes(len(labels), spans), repairs


# ---------------------------------------------------------------------------
# pretrained embeddings
# ---------------------------------------------------------------------------

def load_embeddings(path: str, vocab: Vocabulary, dim: int,
                    rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Text-format embeddings (``token v1 .. v_dim`` per line) aligned to the
    vocabulary. Tokens without a pretrained row (reserved entries included)
    get uniform [-0.1, 0.1] values from ``rng``. Returns the matrix and the
    fraction of non-reserved vocabulary tokens that were covered."""
    matrix = rng.uniform(-0.1, 0.1, size=(vocab.size, dim))
    covered: set[int] = set()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            fields = line.rstrip("\n").split()
            if not fields:
                continue
            token, values = fields[0], fields[1:]
            if len(values) != dim:
                raise ValueError(f"{path}:{lineno}: expected {dim} values, got {len(values)}")
            idx = vocab.token_to_index.get(token.lower() if vocab.lowercase else token)
            if idx is None or idx in covered:
                continue
            covered.add(idx)
            matrix[idx] = [float(v) for v in values]
    n_real = vocab.size - 2
    coverage = (len(covered - {vocab.unk_index, vocab.pad_index}) / n_real) if n_real else 0.0
    return matrix, coverage


# ---------------------------------------------------------------------------
# synthetic HMM corpus
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SynthSpec:
    """Hidden Markov recipe for synthetic corpora: uniform initial label
    distribution, row-stochastic transition (L x L) and emission (L x V)
    matrices, and uniform lengths in [t_min, t_max]."""

    n_labels: int
    vocab_size: int
    t_min: int
    t_max: int
    seed: int
    transitions: np.ndarray = field(repr=False)
    emissions: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.n_labels < 2 or self.vocab_size < 2:
            raise ValueError("need at least 2 labels and 2 tokens")
        if not (1 <= self.t_min <= self.t_max):
            raise ValueError(f"bad length range [{self.t_min}, {self.t_max}]")
        for name, mat, cols in (("transitions", self.transitions, self.n_labels),
                                ("emissions", self.emissions, self.vocab_size)):
            if mat.shape != (self.n_labels, cols):
                raise ValueError(f"{name} must have shape {(self.n_labels, cols)}, got {mat.shape}")
            if mat.min() < 0 or not np.allclose(mat.sum(axis=1), 1.0, atol=1e-9):
                raise ValueError(f"{name} rows must be non-negative and sum to 1")


def make_hmm_spec(n_labels: int = 8, vocab_size: int = 50, t_min: int = 5,
                  t_max: int = 20, seed: int = 0) -> SynthSpec:
    """Standard learnable recipe: cyclic-dominant transitions (0.55 to the
    next label, 0.25 self-loop, remainder spread) and per-label owned token
    blocks (0.85 mass over ~V/L owned tokens, 0.15 uniform noise)."""
    L, V = n_labels, vocab_size
    rest = 0.20 / (L - 2) if L > 2 else 0.0
    trans = np.full((L, L), rest)
    for j in range(L):
        trans[j, j] = 0.25
        trans[j, (j + 1) % L] = 0.55 + (0.20 if L == 2 else 0.0)
    block = V // L
    emis = np.full((L, V), 0.15 / V)
    for j in range(L):
        lo = j * block
        hi = lo + block if j < L - 1 else V
        emis[j, lo:hi] += 0.85 / (hi - lo)
    return SynthSpec(n_labels=L, vocab_size=V, t_min=t_min, t_max=t_max, seed=seed,
                     transitions=trans, emissions=emis)


def synthetic_inventories(spec: SynthSpec) -> tuple[Vocabulary, LabelSet]:
    width = len(str(spec.vocab_size - 1))
    vocab = Vocabulary.build(f"w{i:0{width}d}" for i in range(spec.vocab_size))
    labels = LabelSet.build(f"L{j}" for j in range(spec.n_labels))
    return vocab, labels


def gen_synthetic(spec: SynthSpec, n: int, rng: np.random.Generator | None = None,
                  vocab: Vocabulary | None = None, labels: LabelSet | None = None) -> Dataset:
    """Sample ``n`` sentences from the HMM. Deterministic given the spec seed;
    pass a shared ``rng`` to draw several splits from one stream."""
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    if vocab is None or labels is None:
        vocab, labels = synthetic_inventories(spec)
    L = spec.n_labels
    examples = []
    for _ in range(n):
        t = int(rng.integers(spec.t_min, spec.t_max + 1))
        gold = np.empty(t, dtype=np.intp)
        gold[0] = rng.choice(L)
        for i in range(1, t):
            gold[i] = rng.choice(L, p=spec.transitions[gold[i - 1]])
        toks = np.array([rng.choice(spec.vocab_size, p=spec.emissions[y]) for y in gold])
        # +2 shifts past the reserved unk/pad rows
        examples.append(Example(tokens=tuple(int(w) + 2 for w in toks),
                                gold=tuple(int(y) for y in gold)))
    return Dataset(examples=tuple(examples), vocab=vocab, labels=labels)


def synthetic_splits(spec: SynthSpec, n_train: int, n_dev: int, n_test: int,
                     ) -> tuple[Dataset, Dataset, Dataset]:
    rng = np.random.default_rng(spec.seed)
    vocab, labels = synthetic_inventories(spec)
    train = gen_synthetic(spec, n_train, rng=rng, vocab=vocab, labels=labels)
    dev = gen_synthetic(spec, n_dev, rng=rng, vocab=vocab, labels=labels)
    test = gen_synthetic(spec, n_test, rng=rng, vocab=vocab, labels=labels)
    return train, dev, test


# ---------------------------------------------------------------------------
# dataset cache (same binary container as parameter stores, distinct tag)
# ---------------------------------------------------------------------------

def _str_entry(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def _entry_str(arr: np.ndarray) -> str:
    return bytes(arr.astype(np.uint8)).decode("utf-8")


def save_dataset(dataset: Dataset, path: str) -> None:
    entries: list[tuple[str, np.ndarray]] = [
        ("meta", np.array([len(dataset.examples), int(dataset.vocab.lowercase)], dtype=np.float64)),
        ("vocab", _str_entry("\n".join(dataset.vocab.index_to_token))),
        ("labels", _str_entry("\n".join(dataset.labels.labels))),
    ]
    for i, ex in enumerate(dataset.examples):
        entries.append((f"ex{i:06d}", np.array([ex.tokens, ex.gold], dtype=np.float64)))
    write_container(path, TAG_DATASET, entries)


def load_dataset(path: str) -> Dataset:
    entries = dict(read_container(path, TAG_DATASET))
    try:
        n, lowercase = (int(v) for v in entries["meta"])
        tokens = _entry_str(entries["vocab"]).split("\n")
        label_names = _entry_str(entries["labels"]).split("\n")
    except KeyError as e:
        raise ValueError(f"{path}: dataset cache missing entry {e}") from None
    vocab = Vocabulary(index_to_token=tuple(tokens),
                       token_to_index={t: i for i, t in enumerate(tokens)},
                       lowercase=bool(lowercase))
    labels = LabelSet.build(label_names)
    examples = []
    for i in range(n):
        arr = entries[f"ex{i:06d}"].astype(np.intp)
        examples.append(Example(tokens=tuple(int(v) for v in arr[0]),
                                gold=tuple(int(v) for v in arr[1])))
    return Dataset(examples=tuple(examples), vocab=vocab, labels=labels)
