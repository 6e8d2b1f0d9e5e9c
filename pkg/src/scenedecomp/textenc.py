"""Word-level tokenizer, concept handle table and a per-token text encoder.

Handle tokens are written ``[v1]``, ``[v2]``, ``[vbg]`` ... in prompts.  Their
embeddings live in :class:`HandleTable`, separate from the base word table, so
that the first training phase can optimise them alone.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .gradcore import Graph

D_TEXT = 32
# word rows are small so that handle updates at the extraction learning rate
# can travel between words; the first transform layer restores unit scale
TABLE_STD = 0.05
SEQ_LEN = 16
PAD = "<pad>"

_HANDLE_RE = re.compile(r"^\[v[0-9a-z_]+\]$")

TEMPLATE_WORDS = (
    "a photo of and at the beach in jungle snow street on top pink fabric "
    "wooden floor with city background mountain eiffel tower floating water"
).split()

# words the synthetic corpus and handle initialisers use
SCENE_WORDS = (
    "object thing red green blue yellow purple orange cyan white black gray "
    "square disc triangle bar ring cross"
).split()

DEFAULT_LEXICON = tuple(dict.fromkeys([PAD] + TEMPLATE_WORDS + SCENE_WORDS))


class TokenizeError(ValueError):
    pass


class HandleError(ValueError):
    pass


class Vocabulary:
    """Fixed base lexicon plus a counter for handle token ids."""

    def __init__(self, words=DEFAULT_LEXICON):
        words = tuple(dict.fromkeys(w.lower() for w in words))
        if PAD not in words:
            words = (PAD,) + words
        self._words = words
        self._ids = {w: i for i, w in enumerate(words)}
        self.next_free_id = len(words)

    @property
    def words(self) -> tuple[str, ...]:
        return self._words

    @property
    def pad_id(self) -> int:
        return self._ids[PAD]

    def __len__(self):
        return len(self._words)

    def __contains__(self, word):
        return word.lower() in self._ids

    def id(self, word: str) -> int:
        try:
            return self._ids[word.lower()]
        except KeyError:
            raise TokenizeError(f"unknown word {word!r}") from None

    def word(self, token_id: int) -> str:
        return self._words[token_id]

    def allocate(self) -> int:
        tid = self.next_free_id
        self.next_free_id += 1
        return tid


@dataclass
class Handle:
    name: str
    token_id: int
    background: bool = False


@dataclass
class HandleTable:
    """Ordered concept handles; ``embeddings[k]`` belongs to ``handles[k]``."""

    handles: list[Handle] = field(default_factory=list)
    embeddings: np.ndarray = field(default_factory=lambda: np.zeros((0, D_TEXT)))

    def __len__(self):
        return len(self.handles)

    @property
    def names(self) -> list[str]:
        return [h.name for h in self.handles]

    def index(self, name: str) -> int:
        for k, h in enumerate(self.handles):
            if h.name == name:
                return k
        raise HandleError(f"unknown handle {name!r}; available: {', '.join(self.names)}")

    def by_token(self, token_id: int) -> int | None:
        for k, h in enumerate(self.handles):
            if h.token_id == token_id:
                return k
        return None

    def background_handles(self) -> list[str]:
        return [h.name for h in self.handles if h.background]

    def copy(self) -> "HandleTable":
        return HandleTable([Handle(h.name, h.token_id, h.background) for h in self.handles],
                           self.embeddings.copy())


@dataclass
class TextEncoderParams:
    """Base word table and the residual two-layer per-token transform."""

    table: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, vocab: Vocabulary, rng: np.random.Generator, d: int = D_TEXT):
        s = 1.0 / np.sqrt(d)
        return cls(
            table=rng.normal(0.0, TABLE_STD, (len(vocab), d)),
            w1=rng.normal(0.0, s / TABLE_STD, (d, d)),
            b1=np.zeros(d),
            w2=rng.normal(0.0, s, (d, d)),
            b2=np.zeros(d),
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {"text.table": self.table, "text.w1": self.w1, "text.b1": self.b1,
                "text.w2": self.w2, "text.b2": self.b2}


@dataclass
class Tokens:
    ids: np.ndarray
    handle_positions: dict[str, int]


def tokenize(prompt: str, vocab: Vocabulary, handles: HandleTable,
             length: int = SEQ_LEN) -> Tokens:
    words = prompt.lower().split()
    if len(words) > length:
        raise TokenizeError(f"prompt has {len(words)} words, limit is {length}")
    ids = np.full(length, vocab.pad_id, dtype=np.int64)
    positions: dict[str, int] = {}
    for pos, w in enumerate(words):
        if _HANDLE_RE.match(w):
            k = handles.index(w)
            ids[pos] = handles.handles[k].token_id
            positions.setdefault(w, pos)
        else:
            ids[pos] = vocab.id(w)
    return Tokens(ids, positions)


def detokenize(ids, vocab: Vocabulary, handles: HandleTable) -> str:
    words = []
    for tid in np.asarray(ids).tolist():
        k = handles.by_token(tid)
        if k is not None:
            words.append(handles.handles[k].name)
        elif tid != vocab.pad_id:
            words.append(vocab.word(tid))
    return " ".join(words)


def add_handle(handles: HandleTable, name: str, initializer_word: str, vocab: Vocabulary,
               params: TextEncoderParams, background: bool = False) -> int:
    """Append a handle initialised to a copy of ``initializer_word``'s embedding."""
    name = name.lower()
    if not _HANDLE_RE.match(name):
        raise HandleError(f"handle names look like [v1], got {name!r}")
    if name in handles.names:
        raise HandleError(f"duplicate handle {name!r}")
    if initializer_word not in vocab:
        raise HandleError(f"unknown initializer word {initializer_word!r}")
    row = params.table[vocab.id(initializer_word)].copy()
    handles.handles.append(Handle(name, vocab.allocate(), background))
    handles.embeddings = np.vstack([handles.embeddings.reshape(-1, row.size), row[None]])
    return len(handles) - 1


def one_hots(token_ids: np.ndarray, vocab_size: int, handles: HandleTable):
    """Selection matrices routing each position to the word or handle table."""
    ids = np.atleast_2d(token_ids)
    n, length = ids.shape
    base = np.zeros((n, length, vocab_size))
    hsel = np.zeros((n, length, max(len(handles), 1)))
    for b in range(n):
        for pos, tid in enumerate(ids[b]):
            k = handles.by_token(int(tid))
            if k is None:
                base[b, pos, tid] = 1.0
            else:
                hsel[b, pos, k] = 1.0
    return base, hsel


def encode(graph: Graph, token_ids: np.ndarray, nodes: dict[str, int],
           vocab_size: int, handles: HandleTable) -> int:
    """Encode a batch ``(N, L)`` of token ids into an ``(N, L, d)`` node.

    ``nodes`` maps ``text.*`` parameter names and ``handles`` to graph node ids.
    """
    base, hsel = one_hots(token_ids, vocab_size, handles)
    e = graph.matmul(graph.const(base), nodes["text.table"])
    if len(handles):
        e = graph.add(e, graph.matmul(graph.const(hsel), nodes["handles"]))
    h = graph.silu(graph.badd(graph.matmul(e, nodes["text.w1"]), nodes["text.b1"]))
    h = graph.badd(graph.matmul(h, nodes["text.w2"]), nodes["text.b2"])
    return graph.add(e, h)
