"""Corpus data model and ingestion.

Instances are read from JSON Lines, one sentence per line::

    {"tokens": [...], "head": {"id": "e1", "start": 0, "end": 0},
     "tail": {"id": "e2", "start": 3, "end": 4}, "relation": "NA"}

Span indices are 0-based and end-inclusive.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

NA = "NA"
PAD = "<pad>"
UNK = "<unk>"
MAX_SENTENCE_LEN = 256


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Entity:
    id: str
    start: int
    end: int

    @property
    def span(self) -> tuple[int, int]:
        return (self.start, self.end)


@dataclass(frozen=True)
class SentenceInstance:
    tokens: tuple[str, ...]
    head: Entity
    tail: Entity
    relation: str

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        m = len(self.tokens)
        for role, ent in (("head", self.head), ("tail", self.tail)):
            if not (0 <= ent.start <= ent.end < m):
                raise CorpusError(f"{role} span [{ent.start}, {ent.end}] outside sentence of length {m}")
        if self.head.start <= self.tail.end and self.tail.start <= self.head.end:
            raise CorpusError(f"head span {self.head.span} overlaps tail span {self.tail.span}")

    @property
    def head_span(self) -> tuple[int, int]:
        return self.head.span

    @property
    def tail_span(self) -> tuple[int, int]:
        return self.tail.span

    def ordered_spans(self) -> tuple[tuple[int, int], tuple[int, int]]:
        """(first, second) entity spans in token order; the head is assumed first."""
        if self.tail.start < self.head.start:
            return self.tail.span, self.head.span
        return self.head.span, self.tail.span

    def to_json(self) -> dict:
        return {
            "tokens": list(self.tokens),
            "head": {"id": self.head.id, "start": self.head.start, "end": self.head.end},
            "tail": {"id": self.tail.id, "start": self.tail.start, "end": self.tail.end},
            "relation": self.relation,
        }


def _entity(obj: dict, role: str) -> Entity:
    if not isinstance(obj, dict):
        raise CorpusError(f"field {role!r} must be an object")
    for key in ("id", "start", "end"):
        if key not in obj:
            raise CorpusError(f"missing field {role}.{key}")
    start, end = obj["start"], obj["end"]
    if not (isinstance(start, int) and isinstance(end, int)) or start > end:
        raise CorpusError(f"field {role} has invalid span [{start!r}, {end!r}]")
    return Entity(str(obj["id"]), start, end)


def parse_instance(obj, max_sentence_len: int = MAX_SENTENCE_LEN) -> SentenceInstance | None:
    """Build an instance from one decoded JSON object.

    Returns None when right-truncation to ``max_sentence_len`` would cut an
    entity span.
    """
    if not isinstance(obj, dict):
        raise CorpusError("line is not a JSON object")
    for key in ("tokens", "head", "tail", "relation"):
        if key not in obj:
            raise CorpusError(f"missing field {key!r}")
    tokens = obj["tokens"]
    if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
        raise CorpusError("field 'tokens' must be an array of strings")
    head, tail = _entity(obj["head"], "head"), _entity(obj["tail"], "tail")
    if len(tokens) > max_sentence_len:
        if max(head.end, tail.end) >= max_sentence_len:
            return None
        tokens = tokens[:max_sentence_len]
    return SentenceInstance(tuple(tokens), head, tail, str(obj["relation"]))


def load_jsonl(path, max_sentence_len: int = MAX_SENTENCE_LEN) -> list[SentenceInstance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                inst = parse_instance(json.loads(line), max_sentence_len)
            except json.JSONDecodeError as err:
                raise CorpusError(f"{path}:{lineno}: malformed JSON ({err.msg})") from None
            except CorpusError as err:
                raise CorpusError(f"{path}:{lineno}: {err}") from None
            if inst is None:
                logger.warning("%s:%d: dropped, truncation to %d tokens would cut an entity",
                               path, lineno, max_sentence_len)
                continue
            out.append(inst)
    return out


def dumps_jsonl(instances: Iterable[SentenceInstance]) -> str:
    return "".join(json.dumps(i.to_json(), ensure_ascii=False) + "\n" for i in instances)


def save_jsonl(instances: Iterable[SentenceInstance], path) -> None:
    Path(path).write_text(dumps_jsonl(instances), encoding="utf-8")


# ---------------------------------------------------------------- vocabulary


class Vocabulary:
    """Token <-> index map; index 0 is PAD and index 1 is UNK."""

    PAD_INDEX = 0
    UNK_INDEX = 1

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = [PAD, UNK]
        self.stoi: dict[str, int] = {PAD: 0, UNK: 1}
        for tok in tokens:
            if tok in self.stoi:
                raise CorpusError(f"duplicate token {tok!r}")
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, tok: str) -> bool:
        return tok in self.stoi

    def index(self, tok: str) -> int:
        return self.stoi.get(tok, self.UNK_INDEX)

    def tokens(self) -> list[str]:
        """Non-reserved tokens in index order."""
        return self.itos[2:]


def index_tokens(instance: SentenceInstance | Sequence[str], vocab: Vocabulary) -> np.ndarray:
    tokens = instance.tokens if isinstance(instance, SentenceInstance) else instance
    return np.array([vocab.index(t) for t in tokens], dtype=np.intp)


def _uniform_rows(n: int, dim: int, seed: int, stream: int) -> np.ndarray:
    rng = np.random.default_rng([seed, stream])
    return rng.uniform(-0.25, 0.25, size=(n, dim))


def load_embeddings(path, seed: int = 0, extra_tokens: Iterable[str] = ()) -> tuple[Vocabulary, np.ndarray]:
    """Read a GloVe-format text file.

    Rows for PAD (zeros) and UNK (uniform in [-0.25, 0.25]) are prepended.
    ``extra_tokens`` not present in the file are appended with random rows,
    so corpus words missing from the pretrained set stay distinguishable.
    """
    tokens: list[str] = []
    rows: list[list[float]] = []
    seen: set[str] = set()
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            tok, nums = parts[0], parts[1:]
            try:
                vec = [float(x) for x in nums]
            except ValueError:
                raise CorpusError(f"{path}:{lineno}: non-numeric value for token {tok!r}") from None
            if dim is None:
                dim = len(vec)
                if dim == 0:
                    raise CorpusError(f"{path}:{lineno}: no vector values for token {tok!r}")
            elif len(vec) != dim:
                raise CorpusError(f"{path}:{lineno}: expected {dim} values, found {len(vec)}")
            if tok in seen:
                raise CorpusError(f"{path}:{lineno}: duplicate token {tok!r}")
            seen.add(tok)
            tokens.append(tok)
            rows.append(vec)
    if dim is None:
        raise CorpusError(f"{path}: no embeddings found")
    extra = [t for t in dict.fromkeys(extra_tokens) if t not in seen and t not in (PAD, UNK)]
    vocab = Vocabulary(tokens + extra)
    matrix = np.zeros((len(vocab), dim))
    matrix[Vocabulary.UNK_INDEX] = _uniform_rows(1, dim, seed, 0)[0]
    if rows:
        matrix[2:2 + len(rows)] = np.asarray(rows)
    if extra:
        matrix[2 + len(rows):] = _uniform_rows(len(extra), dim, seed, 1)
    return vocab, matrix


def random_embeddings(tokens: Iterable[str], dim: int, seed: int = 0) -> tuple[Vocabulary, np.ndarray]:
    """Vocabulary over ``tokens`` with rows drawn uniformly from [-0.25, 0.25]."""
    vocab = Vocabulary(dict.fromkeys(t for t in tokens if t not in (PAD, UNK)))
    matrix = np.zeros((len(vocab), dim))
    matrix[1:] = _uniform_rows(len(vocab) - 1, dim, seed, 2)
    return vocab, matrix


def save_embeddings(vocab: Vocabulary, matrix: np.ndarray, path) -> None:
    lines = []
    for i, tok in enumerate(vocab.tokens(), start=2):
        lines.append(tok + " " + " ".join(repr(float(x)) for x in matrix[i]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def corpus_tokens(instances: Iterable[SentenceInstance]) -> list[str]:
    return list(dict.fromkeys(t for inst in instances for t in inst.tokens))


# ---------------------------------------------------------------- relations and bags


class RelationInventory:
    """Relation names with NA pinned at index 0."""

    def __init__(self, names: Iterable[str], na: str = NA):
        names = list(names)
        if names.count(na) != 1:
            raise CorpusError(f"relation inventory must contain {na!r} exactly once")
        if len(set(names)) != len(names):
            raise CorpusError("duplicate relation names")
        self.na = na
        self.names = [na] + [n for n in names if n != na]
        self.index = {n: i for i, n in enumerate(self.names)}

    @classmethod
    def from_instances(cls, instances: Iterable[SentenceInstance], na: str = NA) -> "RelationInventory":
        found = sorted({i.relation for i in instances} - {na})
        return cls([na] + found, na)

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name: str) -> bool:
        return name in self.index

    def is_na(self, name: str) -> bool:
        return name == self.na


@dataclass(frozen=True)
class Bag:
    head: str
    tail: str
    relation: str | None
    instances: tuple[SentenceInstance, ...]
    gold: frozenset[str] = field(default_factory=frozenset)

    @property
    def key(self) -> tuple:
        return (self.head, self.tail, self.relation)

    def __len__(self) -> int:
        return len(self.instances)


def build_bags(instances: Iterable[SentenceInstance], mode: str = "train") -> list[Bag]:
    """Group instances into bags in order of first appearance.

    ``train`` groups by (head id, tail id, relation); ``eval`` groups by the
    entity pair only and keeps the set of gold relations.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    groups: dict[tuple, list[SentenceInstance]] = {}
    for inst in instances:
        key = (inst.head.id, inst.tail.id) + ((inst.relation,) if mode == "train" else ())
        groups.setdefault(key, []).append(inst)
    bags = []
    for key, members in groups.items():
        gold = frozenset(m.relation for m in members)
        rel = key[2] if mode == "train" else None
        bags.append(Bag(key[0], key[1], rel, tuple(members), gold))
    return bags


# ---------------------------------------------------------------- synthetic corpus


@dataclass
class SynthConfig:
    seed: int = 0
    num_relations: int = 8           # excluding NA
    vocab_size: int = 500
    triggers_per_relation: int = 3
    sentences_per_bag: tuple[int, int] = (1, 4)
    filler_per_segment: tuple[int, int] = (1, 5)
    noise_rate: float = 0.3
    noise_multiplier: tuple[float, float] = (0.0, 1.0)
    placement: tuple[float, float, float] = (0.15, 0.7, 0.15)
    train_bags: int = 600
    test_bags: int = 200
    na_fraction: float = 0.3

    def validate(self) -> None:
        if not 0.0 <= self.noise_rate < 1.0:
            raise CorpusError(f"noise_rate must lie in [0, 1), got {self.noise_rate}")
        if self.num_relations < 2:
            raise CorpusError("need at least 2 relations besides NA")
        lo, hi = self.sentences_per_bag
        if not 1 <= lo <= hi:
            raise CorpusError(f"invalid sentences_per_bag {self.sentences_per_bag}")
        flo, fhi = self.filler_per_segment
        if not 0 <= flo <= fhi:
            raise CorpusError(f"invalid filler_per_segment {self.filler_per_segment}")
        lo_m, hi_m = self.noise_multiplier
        if not 0.0 <= lo_m <= hi_m:
            raise CorpusError(f"invalid noise_multiplier {self.noise_multiplier}")
        p = np.asarray(self.placement, dtype=float)
        if p.shape != (3,) or (p < 0).any() or not np.isclose(p.sum(), 1.0):
            raise CorpusError(f"placement must be 3 non-negative weights summing to 1, got {self.placement}")
        needed = self.num_relations * self.triggers_per_relation
        if self.vocab_size < needed + 2:
            raise CorpusError(f"vocab_size {self.vocab_size} too small for {needed} disjoint "
                              "trigger tokens plus filler")

    def relation_names(self) -> list[str]:
        return [f"rel_{i}" for i in range(self.num_relations)]

    def words(self) -> list[str]:
        """The generator's vocabulary; entity ids are deliberately not part of it."""
        return [f"w{i:04d}" for i in range(self.vocab_size)]


@dataclass
class SynthTruth:
    triggers: dict[str, list[str]]
    filler: list[str]
    noisy_bags: list[tuple[str, str, str]]
    train_noisy_flags: list[bool]

    def to_json(self) -> dict:
        return {
            "triggers": self.triggers,
            "noisy_bags": [list(k) for k in self.noisy_bags],
            "train_noisy_flags": self.train_noisy_flags,
        }


def _synth_sentence(rng, cfg: SynthConfig, head: str, tail: str, trigger: str | None,
                    filler: list[str], relation: str) -> SentenceInstance:
    lo, hi = cfg.filler_per_segment
    counts = rng.integers(lo, hi + 1, size=3)
    pieces = [[filler[j] for j in rng.integers(0, len(filler), size=c)] for c in counts]
    if trigger is not None:
        seg = int(rng.choice(3, p=np.asarray(cfg.placement, dtype=float)))
        pos = int(rng.integers(0, len(pieces[seg]) + 1))
        pieces[seg].insert(pos, trigger)
    # segments: [left .. head] [middle .. tail] [right]
    tokens = pieces[0] + [head] + pieces[1] + [tail] + pieces[2]
    h = len(pieces[0])
    t = h + 1 + len(pieces[1])
    return SentenceInstance(tuple(tokens), Entity(head, h, h), Entity(tail, t, t), relation)


def _synth_split(rng, cfg: SynthConfig, n_bags: int, prefix: str, triggers, filler, noise: float):
    rels = cfg.relation_names()
    instances: list[SentenceInstance] = []
    flags: list[bool] = []
    noisy_keys = []
    lo, hi = cfg.sentences_per_bag
    for b in range(n_bags):
        head, tail = f"{prefix}H{b:05d}", f"{prefix}T{b:05d}"
        is_na = rng.random() < cfg.na_fraction
        relation = NA if is_na else rels[int(rng.integers(len(rels)))]
        t = int(rng.integers(lo, hi + 1))
        members = []
        for _ in range(t):
            trig = None if is_na else triggers[relation][int(rng.integers(cfg.triggers_per_relation))]
            members.append((_synth_sentence(rng, cfg, head, tail, trig, filler, relation), False))
        if rng.random() < noise:
            noisy_keys.append((head, tail, relation))
            lo_m, hi_m = cfg.noise_multiplier
            n_noise = max(1, int(round(rng.uniform(lo_m, hi_m) * t)))
            others = [r for r in rels if r != relation]
            for _ in range(n_noise):
                wrong = others[int(rng.integers(len(others)))]
                trig = triggers[wrong][int(rng.integers(cfg.triggers_per_relation))]
                sent = _synth_sentence(rng, cfg, head, tail, trig, filler, relation)
                members.insert(int(rng.integers(0, len(members) + 1)), (sent, True))
        for inst, noisy in members:
            instances.append(inst)
            flags.append(noisy)
    return instances, flags, noisy_keys


def generate_synthetic(cfg: SynthConfig) -> tuple[list[SentenceInstance], list[SentenceInstance], SynthTruth]:
    """Seeded noisy distant-supervision corpus.

    Every relation owns ``triggers_per_relation`` tokens.  A clean sentence
    for relation r carries one of r's triggers in a segment drawn from
    ``placement``; NA sentences carry none.  With probability ``noise_rate``
    a training bag with t clean sentences also receives round(u * t) noisy
    ones (at least one, u uniform over ``noise_multiplier``) whose triggers
    belong to a different relation while keeping label r.  The test split is noise-free.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    words = cfg.words()
    order = rng.permutation(cfg.vocab_size)
    n_trig = cfg.num_relations * cfg.triggers_per_relation
    trig_words = [words[i] for i in order[:n_trig]]
    filler = [words[i] for i in sorted(order[n_trig:])]
    triggers = {
        r: trig_words[k * cfg.triggers_per_relation:(k + 1) * cfg.triggers_per_relation]
        for k, r in enumerate(cfg.relation_names())
    }
    train, flags, noisy = _synth_split(rng, cfg, cfg.train_bags, "tr", triggers, filler, cfg.noise_rate)
    test, _, _ = _synth_split(rng, cfg, cfg.test_bags, "te", triggers, filler, 0.0)
    return train, test, SynthTruth(triggers, filler, noisy, flags)
