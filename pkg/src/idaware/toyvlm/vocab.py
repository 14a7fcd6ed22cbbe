"""Token vocabulary for the toy decoder.

Two reserved placeholder families — ``<ID-Img{i}>`` and ``<Test-Img{i}>`` —
are single tokens whose embedding rows are never used: assembly replaces each
placeholder position with an image's compressed token block.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..errors import ValidationError

EOT = "<eot>"

SLOT_WORDS = ("left", "middle", "right")
OPTION_WORDS = ("A", "B", "C", "D")
QUERY_WORDS = (
    "is",
    "who",
    "where",
    "which",
    "shows",
    "in",
    "describe",
    "?",
    ".",
)

# Default name pool for the synthetic world; bindings are re-drawn per sample,
# so a name is a label, never a stable identity cue.  The pool is kept large
# on purpose: with ~200 names each one is rare in any finite dataset, so a
# model cannot shortcut identity questions through per-name statistics — it
# has to treat names as opaque labels and route them through the references.
_NAME_SEEDS = (
    "Alice", "Ben", "Carol", "David", "Elena", "Felix", "Grace", "Henry",
    "Iris", "Jack", "Karen", "Leo", "Mona", "Nate", "Olga", "Peter",
    "Quinn", "Rosa", "Sam", "Tina", "Ulric", "Vera", "Walt", "Xena",
    "Yuri", "Zoe", "Ava", "Boris", "Cleo", "Dana", "Emil", "Faye",
    "Gus", "Hana", "Ivan", "June", "Kira", "Lars", "Mira", "Noel",
)
_NAME_SUFFIXES = ("", "2", "3", "4", "5")
DEFAULT_NAMES = tuple(
    f"{stem}{suffix}" for suffix in _NAME_SUFFIXES for stem in _NAME_SEEDS
)


def img_token(kind: str, i: int) -> str:
    """1-based image placeholder; ``kind`` is "id" or "test"."""
    if kind == "id":
        return f"<ID-Img{i}>"
    if kind == "test":
        return f"<Test-Img{i}>"
    raise ValueError(f"unknown placeholder kind {kind!r}")


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    max_images: int
    name_tokens: tuple[str, ...]
    _index: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise ValidationError("vocabulary contains duplicate tokens")
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise ValidationError(f"unknown token {token!r}") from None

    def token(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.tokens):
            raise ValidationError(f"token id {token_id} outside vocabulary")
        return self.tokens[token_id]

    def encode(self, words) -> list[int]:
        return [self.id(w) for w in words]

    def decode(self, ids) -> list[str]:
        return [self.token(i) for i in ids]

    @property
    def eot_id(self) -> int:
        return self.id(EOT)

    def placeholder_slot(self, token: str) -> tuple[str, int] | None:
        """('id'|'test', 0-based slot index) for placeholder tokens, else None."""
        for family in ("id", "test"):
            for i in range(1, self.max_images + 1):
                if token == img_token(family, i):
                    return family, i - 1
        return None


def build_vocab(
    names=DEFAULT_NAMES, max_images: int = 8, extra_words: tuple[str, ...] = ()
) -> Vocab:
    """Vocabulary layout: end-of-turn, placeholders, task words, then names."""
    tokens: list[str] = [EOT]
    tokens += [img_token("id", i) for i in range(1, max_images + 1)]
    tokens += [img_token("test", i) for i in range(1, max_images + 1)]
    tokens += list(QUERY_WORDS) + list(SLOT_WORDS) + list(OPTION_WORDS)
    tokens += list(extra_words)
    tokens += list(names)
    return Vocab(tokens=tuple(tokens), max_images=max_images, name_tokens=tuple(names))
