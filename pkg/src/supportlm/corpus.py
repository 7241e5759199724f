"""Corpora of (prefix, next-token) samples.

A corpus is a list of pre-tokenized documents plus derived per-position
samples: for every document position t >= 1, the sample predicts token t from
the (at most context_len) preceding tokens. Sample ids follow document order
then position order and are stable across runs for identical inputs.

Includes a deterministic synthetic generator whose clause grammar plants
known structure: predictable function/punctuation transitions, ambiguous
content slots, near-deterministic token pairs with seeded violations, and
exact-count injected patterns over a reserved id range. Every token class is
recorded so per-category breakdowns need no external tagger.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .rng import stream

TRAIN, VALID, TEST = 0, 1, 2
SPLIT_NAMES = ("train", "valid", "test")


# ---------------------------------------------------------------------------
# core container
# ---------------------------------------------------------------------------


@dataclass
class WindowGroup:
    """Same-length input rows ready for one batched forward pass.

    targets/sample_ids are -1 at positions that emit no sample (the warm-up
    positions of sliding windows for documents longer than the context).
    """

    inputs: np.ndarray  # [n, L] int32
    targets: np.ndarray  # [n, L] int64, -1 fill
    sample_ids: np.ndarray  # [n, L] int64, -1 fill


@dataclass
class Corpus:
    documents: list[np.ndarray]
    vocab_size: int
    context_len: int
    categories: np.ndarray | None = None  # per-sample category index
    category_names: tuple[str, ...] = ()
    split_tags: np.ndarray | None = None  # per-sample TRAIN/VALID/TEST

    sample_doc: np.ndarray = field(init=False, repr=False)
    sample_pos: np.ndarray = field(init=False, repr=False)
    sample_target: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        docs, poss, tgts = [], [], []
        for d, doc in enumerate(self.documents):
            doc = np.asarray(doc, dtype=np.int32)
            self.documents[d] = doc
            if doc.size and (doc.min() < 0 or doc.max() >= self.vocab_size):
                bad = int(doc[np.argmax((doc < 0) | (doc >= self.vocab_size))])
                raise ValueError(f"document {d} holds token {bad} outside vocab {self.vocab_size}")
            n = max(doc.size - 1, 0)
            docs.append(np.full(n, d, dtype=np.int32))
            poss.append(np.arange(1, doc.size, dtype=np.int32))
            tgts.append(doc[1:].astype(np.int64))
        self.sample_doc = np.concatenate(docs) if docs else np.empty(0, np.int32)
        self.sample_pos = np.concatenate(poss) if poss else np.empty(0, np.int32)
        self.sample_target = np.concatenate(tgts) if tgts else np.empty(0, np.int64)
        if self.categories is not None and len(self.categories) != self.n_samples:
            raise ValueError("category tags must cover every sample")
        self._plan: list[WindowGroup] | None = None

    @property
    def n_samples(self) -> int:
        return int(self.sample_target.size)

    def prefix(self, sample_id: int) -> np.ndarray:
        d = int(self.sample_doc[sample_id])
        t = int(self.sample_pos[sample_id])
        lo = max(0, t - self.context_len)
        return self.documents[d][lo:t]

    def target(self, sample_id: int) -> int:
        return int(self.sample_target[sample_id])

    def window_plan(self) -> list[WindowGroup]:
        """Rows grouped by input length; each sample appears exactly once."""
        if self._plan is not None:
            return self._plan
        c = self.context_len
        rows: dict[int, list[tuple[np.ndarray, np.ndarray, np.ndarray]]] = {}
        base = 0
        for doc in self.documents:
            T = doc.size
            if T < 2:
                base += max(T - 1, 0)
                continue
            L0 = min(T, c + 1)
            inp = doc[: L0 - 1]
            tgt = doc[1:L0].astype(np.int64)
            ids = np.arange(base, base + L0 - 1, dtype=np.int64)
            rows.setdefault(L0 - 1, []).append((inp, tgt, ids))
            for t in range(c + 1, T):
                inp = doc[t - c : t]
                tgt = np.full(c, -1, dtype=np.int64)
                ids = np.full(c, -1, dtype=np.int64)
                tgt[-1] = doc[t]
                ids[-1] = base + t - 1
                rows.setdefault(c, []).append((inp, tgt, ids))
            base += T - 1
        plan = []
        for length in sorted(rows):
            group = rows[length]
            plan.append(
                WindowGroup(
                    inputs=np.stack([g[0] for g in group]).astype(np.int32),
                    targets=np.stack([g[1] for g in group]),
                    sample_ids=np.stack([g[2] for g in group]),
                )
            )
        self._plan = plan
        return plan

    def split_ids(self, name: str) -> np.ndarray:
        if self.split_tags is None:
            raise ValueError("corpus has no split tags; call split() first")
        return np.nonzero(self.split_tags == SPLIT_NAMES.index(name))[0]

    def category_of(self, sample_ids: np.ndarray) -> np.ndarray:
        if self.categories is None:
            raise ValueError("corpus carries no category tags")
        return self.categories[sample_ids]

    def subset_documents(self, doc_ids) -> "Corpus":
        """New corpus from a document subset (categories/splits recomputed)."""
        docs = [self.documents[int(i)] for i in doc_ids]
        return Corpus(documents=docs, vocab_size=self.vocab_size, context_len=self.context_len)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        if abs(sum(self.ratios) - 1.0) > 1e-9 or any(r < 0 for r in self.ratios):
            raise ValueError(f"ratios must be non-negative and sum to 1, got {self.ratios}")


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = (x + np.uint64(0x9E3779B97F4A7C15)).astype(np.uint64)
    x ^= x >> np.uint64(30)
    x = (x * np.uint64(0xBF58476D1CE4E5B9)).astype(np.uint64)
    x ^= x >> np.uint64(27)
    x = (x * np.uint64(0x94D049BB133111EB)).astype(np.uint64)
    return x ^ (x >> np.uint64(31))


def assign_splits(ids: np.ndarray, spec: SplitSpec) -> np.ndarray:
    """Deterministic 3-way assignment with largest-remainder exact sizes.

    Each id gets a hash score from (id, seed); ids are ranked by score and the
    ranking is cut at sizes that realize the ratios exactly.
    """
    ids = np.asarray(ids, dtype=np.uint64)
    n = ids.size
    with np.errstate(over="ignore"):
        scores = _splitmix64(ids ^ _splitmix64(np.full(n, spec.seed, dtype=np.uint64)))
    order = np.lexsort((ids, scores))
    exact = [r * n for r in spec.ratios]
    sizes = [int(np.floor(e)) for e in exact]
    remainders = [e - s for e, s in zip(exact, sizes)]
    for _ in range(n - sum(sizes)):
        k = int(np.argmax(remainders))
        sizes[k] += 1
        remainders[k] = -1.0
    tags = np.empty(n, dtype=np.int8)
    start = 0
    for split, size in enumerate(sizes):
        tags[order[start : start + size]] = split
        start += size
    return tags


def split(corpus: Corpus, spec: SplitSpec) -> Corpus:
    """Tag every sample with train/valid/test membership."""
    tags = assign_splits(np.arange(corpus.n_samples), spec)
    return replace(corpus, documents=list(corpus.documents), split_tags=tags)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def load_corpus(
    path, vocab_size: int, context_len: int, categories_path=None
) -> Corpus:
    """Read one document per line of space-separated integer token ids."""
    docs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            tokens = np.array([int(tok) for tok in line.split()], dtype=np.int32)
        except ValueError as e:
            raise ValueError(f"{path}:{lineno}: malformed token ({e})") from None
        if tokens.min() < 0 or tokens.max() >= vocab_size:
            bad = int(tokens[np.argmax((tokens < 0) | (tokens >= vocab_size))])
            raise ValueError(f"{path}:{lineno}: token {bad} outside vocab of {vocab_size}")
        docs.append(tokens)
    corpus = Corpus(documents=docs, vocab_size=vocab_size, context_len=context_len)
    if categories_path is not None:
        corpus = _merge_categories(corpus, categories_path)
    return corpus


def save_corpus(corpus: Corpus, path) -> None:
    with open(path, "w") as fh:
        for doc in corpus.documents:
            fh.write(" ".join(str(int(t)) for t in doc) + "\n")


def save_categories(corpus: Corpus, path) -> None:
    if corpus.categories is None:
        raise ValueError("corpus carries no category tags")
    with open(path, "w") as fh:
        for sid in range(corpus.n_samples):
            fh.write(f"{sid} {corpus.category_names[corpus.categories[sid]]}\n")


def _merge_categories(corpus: Corpus, path) -> Corpus:
    names: list[str] = []
    index: dict[str, int] = {}
    cats = np.full(corpus.n_samples, -1, dtype=np.int16)
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            sid_s, name = line.split()
            sid = int(sid_s)
        except ValueError:
            raise ValueError(f"{path}:{lineno}: expected 'sample_id category'") from None
        if not (0 <= sid < corpus.n_samples):
            raise ValueError(f"{path}:{lineno}: sample id {sid} out of range")
        if name not in index:
            index[name] = len(names)
            names.append(name)
        cats[sid] = index[name]
    if (cats < 0).any():
        missing = int(np.nonzero(cats < 0)[0][0])
        raise ValueError(f"category file misses sample {missing}; tags must cover all samples")
    return replace(
        corpus,
        documents=list(corpus.documents),
        categories=cats,
        category_names=tuple(names),
    )


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------

CATEGORY_FUNCTION = "function"
CATEGORY_PUNCT = "punct"
CATEGORY_NUMERAL = "numeral"
CATEGORY_CONTENT = "content"
CATEGORY_INJECTED = "injected"

CATEGORIES = (
    CATEGORY_FUNCTION,
    CATEGORY_PUNCT,
    CATEGORY_NUMERAL,
    CATEGORY_CONTENT,
    CATEGORY_INJECTED,
)


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs for the clause grammar and the exact-count pattern injections.

    The id space is carved into function / punctuation / numeral / content
    classes plus a reserved band at the top that the grammar never emits;
    injected patterns built from reserved ids therefore occur exactly as many
    times as requested.
    """

    vocab_size: int = 256
    n_documents: int = 1560
    doc_len: int = 33
    context_len: int = 32
    seed: int = 0
    n_function: int = 10
    n_punct: int = 4
    n_numeral: int = 16
    n_reserved: int = 16
    n_confusable: int = 8  # content tokens with a near-deterministic cue
    n_decoy: int = 8
    topic_size: int = 24
    zipf_a: float = 1.15
    # clause-type weights: general topic clause, numeral slot, cue->companion
    # pair, ambiguous 16-way slot
    w_topic: float = 0.855
    w_num: float = 0.08
    w_pair: float = 0.045
    w_ambig: float = 0.02
    pair_break_prob: float = 0.07
    topic_second_content: float = 0.9
    injections: tuple[tuple[tuple[int, ...], int], ...] = ()

    def __post_init__(self):
        base = self.n_function + self.n_punct + self.n_numeral + self.n_reserved
        if self.vocab_size <= base + self.n_confusable + self.n_decoy + self.topic_size:
            raise ValueError("vocab too small for the configured token classes")
        for pattern, count in self.injections:
            if len(pattern) > self.doc_len:
                raise ValueError(f"pattern of length {len(pattern)} exceeds doc_len {self.doc_len}")
            if count < 1:
                raise ValueError("injection count must be >= 1")
            if any(not (0 <= t < self.vocab_size) for t in pattern):
                raise ValueError("injection pattern token outside vocab")

    # --- id layout -------------------------------------------------------
    @property
    def function_ids(self):
        return range(0, self.n_function)

    @property
    def punct_ids(self):
        return range(self.n_function, self.n_function + self.n_punct)

    @property
    def numeral_ids(self):
        lo = self.n_function + self.n_punct
        return range(lo, lo + self.n_numeral)

    @property
    def reserved_ids(self):
        return range(self.vocab_size - self.n_reserved, self.vocab_size)

    @property
    def content_ids(self):
        lo = self.n_function + self.n_punct + self.n_numeral
        return range(lo, self.vocab_size - self.n_reserved)

    @property
    def confusable_ids(self):
        lo = self.content_ids.start
        return range(lo, lo + self.n_confusable)

    @property
    def cue_ids(self):
        lo = self.confusable_ids.stop
        return range(lo, lo + self.n_confusable)

    @property
    def decoy_ids(self):
        lo = self.cue_ids.stop
        return range(lo, lo + self.n_decoy)

    @property
    def pool_ids(self):
        return range(self.decoy_ids.stop, self.content_ids.stop)


def token_classes(spec: SyntheticSpec) -> np.ndarray:
    """Category index per token id."""
    cls = np.full(spec.vocab_size, CATEGORIES.index(CATEGORY_CONTENT), dtype=np.int16)
    cls[list(spec.function_ids)] = CATEGORIES.index(CATEGORY_FUNCTION)
    cls[list(spec.punct_ids)] = CATEGORIES.index(CATEGORY_PUNCT)
    cls[list(spec.numeral_ids)] = CATEGORIES.index(CATEGORY_NUMERAL)
    cls[list(spec.reserved_ids)] = CATEGORIES.index(CATEGORY_INJECTED)
    return cls


def _zipf_weights(n: int, a: float) -> np.ndarray:
    w = np.arange(1, n + 1, dtype=np.float64) ** (-a)
    return w / w.sum()


def generate_synthetic(spec: SyntheticSpec) -> Corpus:
    rng = stream(spec.seed, "synthetic-corpus")
    n_general_func = spec.n_function - 1  # func id 0 introduces ambiguous slots
    funcs = np.array(list(spec.function_ids)[1:])
    puncts = np.array(list(spec.punct_ids))
    numerals = np.array(list(spec.numeral_ids))
    confusable = np.array(list(spec.confusable_ids))
    cues = np.array(list(spec.cue_ids))
    decoys = np.array(list(spec.decoy_ids))
    pool = np.array(list(spec.pool_ids))
    ambig_choices = np.concatenate([confusable, decoys])

    # each general function token owns a strided window into the pool
    topics = []
    for j in range(n_general_func):
        start = (j * 7) % max(len(pool) - spec.topic_size, 1)
        topics.append(pool[start : start + spec.topic_size])
    zipf = _zipf_weights(spec.topic_size, spec.zipf_a)
    func_w = _zipf_weights(n_general_func, 0.7)
    clause_kinds = np.array(["topic", "num", "pair", "ambig"])
    clause_w = np.array([spec.w_topic, spec.w_num, spec.w_pair, spec.w_ambig])
    clause_w = clause_w / clause_w.sum()

    def clause() -> list[int]:
        kind = clause_kinds[rng.choice(4, p=clause_w)]
        if kind == "topic":
            jf = int(rng.choice(n_general_func, p=func_w))
            out = [int(funcs[jf]), int(rng.choice(topics[jf], p=zipf))]
            if rng.random() < spec.topic_second_content:
                out.append(int(rng.choice(topics[jf], p=zipf)))
            out.append(int(puncts[jf % len(puncts)]))
            return out
        if kind == "num":
            jf = int(rng.choice(n_general_func, p=func_w))
            return [int(funcs[jf]), int(rng.choice(numerals)), int(puncts[jf % len(puncts)])]
        if kind == "pair":
            j = int(rng.choice(spec.n_confusable))
            follower = int(confusable[j])
            if rng.random() < spec.pair_break_prob:
                follower = int(rng.choice(pool))
            return [int(cues[j]), follower, int(puncts[0])]
        j = int(rng.choice(len(ambig_choices)))
        return [0, int(ambig_choices[j]), int(puncts[1])]

    documents = []
    for _ in range(spec.n_documents):
        tokens: list[int] = []
        while len(tokens) < spec.doc_len:
            tokens.extend(clause())
        documents.append(np.array(tokens[: spec.doc_len], dtype=np.int32))

    _inject_patterns(documents, spec)

    corpus = Corpus(
        documents=documents,
        vocab_size=spec.vocab_size,
        context_len=spec.context_len,
        category_names=CATEGORIES,
    )
    cls = token_classes(spec)
    corpus.categories = cls[corpus.sample_target]
    return corpus


def _inject_patterns(documents: list[np.ndarray], spec: SyntheticSpec) -> None:
    if not spec.injections:
        return
    rng = stream(spec.seed, "synthetic-injections")
    occupied = [np.zeros(len(d), dtype=bool) for d in documents]
    for pattern, count in spec.injections:
        pat = np.array(pattern, dtype=np.int32)
        for _ in range(count):
            for _attempt in range(10_000):
                d = int(rng.integers(len(documents)))
                if len(documents[d]) < len(pat):
                    continue
                start = int(rng.integers(len(documents[d]) - len(pat) + 1))
                if not occupied[d][start : start + len(pat)].any():
                    documents[d][start : start + len(pat)] = pat
                    occupied[d][start : start + len(pat)] = True
                    break
            else:
                raise ValueError("could not place injected pattern without overlap")
    for pattern, count in spec.injections:
        found = pattern_count(documents, pattern)
        if found != count:
            raise ValueError(
                f"pattern {pattern} occurs {found} times, requested {count}; "
                "use reserved token ids to guarantee exact counts"
            )


def pattern_count(documents: list[np.ndarray], pattern) -> int:
    """Occurrences of a contiguous token pattern across all documents."""
    pat = np.asarray(pattern, dtype=np.int32)
    total = 0
    for doc in documents:
        if doc.size < pat.size:
            continue
        windows = np.lib.stride_tricks.sliding_window_view(doc, pat.size)
        total += int((windows == pat).all(axis=1).sum())
    return total
