"""Special tokens and the byte-level tokenizer used by the toy model and corpus tools."""
from __future__ import annotations

import re
from dataclasses import dataclass

TITLE_OPEN = "<Title>"
TITLE_CLOSE = "</Title>"
BRANCH_OPEN = "<Branch>"
BRANCH_CLOSE = "</Branch>"
PARA_OPEN = "<Para>"
PARA_CLOSE = "</Para>"
TAGS = (TITLE_OPEN, TITLE_CLOSE, BRANCH_OPEN, BRANCH_CLOSE, PARA_OPEN, PARA_CLOSE)

N_SPECIAL = len(TAGS)


@dataclass(frozen=True)
class SpecialTokens:
    title_open: int
    title_close: int
    branch_open: int
    branch_close: int
    para_open: int
    para_close: int

    def __post_init__(self):
        if len(set(self.ids)) != N_SPECIAL:
            raise ValueError(f"special token ids must be distinct: {self.ids}")

    @classmethod
    def for_vocab(cls, vocab_size: int) -> "SpecialTokens":
        """The six highest ids of a vocabulary, in tag order."""
        if vocab_size < N_SPECIAL + 1:
            raise ValueError(f"vocab_size {vocab_size} too small to reserve special tokens")
        base = vocab_size - N_SPECIAL
        return cls(*range(base, vocab_size))

    @property
    def ids(self) -> tuple[int, ...]:
        return (self.title_open, self.title_close, self.branch_open,
                self.branch_close, self.para_open, self.para_close)

    def tag(self, token_id: int) -> str | None:
        try:
            return TAGS[self.ids.index(token_id)]
        except ValueError:
            return None


def eos_for_vocab(vocab_size: int) -> int:
    """EOS sits directly below the special-token block."""
    return vocab_size - N_SPECIAL - 1


_TAG_RE = re.compile("(" + "|".join(re.escape(t) for t in TAGS) + ")")


class ByteTokenizer:
    """UTF-8 bytes as ids 0..255, then EOS, then the six tag tokens.

    Decoding uses ``surrogateescape`` so arbitrary byte sequences (e.g. from an
    untrained model) survive a decode/encode round trip.
    """

    n_bytes = 256
    default_vocab_size = n_bytes + 1 + N_SPECIAL

    def __init__(self, vocab_size: int = default_vocab_size):
        if vocab_size < self.default_vocab_size:
            raise ValueError(f"byte tokenizer needs vocab_size >= {self.default_vocab_size}")
        self.vocab_size = vocab_size
        self.eos_id = eos_for_vocab(self.vocab_size)
        self.specials = SpecialTokens.for_vocab(self.vocab_size)
        self._tag_ids = dict(zip(TAGS, self.specials.ids))

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for piece in _TAG_RE.split(text):
            if not piece:
                continue
            tag_id = self._tag_ids.get(piece)
            if tag_id is not None:
                ids.append(tag_id)
            else:
                ids.extend(piece.encode("utf-8", "surrogateescape"))
        return ids

    def decode(self, ids) -> str:
        out: list[str] = []
        buf = bytearray()
        for t in ids:
            t = int(t)
            if t < self.n_bytes:
                buf.append(t)
                continue
            if buf:
                out.append(buf.decode("utf-8", "surrogateescape"))
                buf.clear()
            if t == self.eos_id:
                continue
            tag = self.specials.tag(t)
            if tag is not None:
                out.append(tag)
            elif t < self.eos_id:
                out.append(f"<|{t}|>")  # unused id of an enlarged vocabulary
            else:
                raise ValueError(f"token id {t} outside vocabulary")
        if buf:
            out.append(buf.decode("utf-8", "surrogateescape"))
        return "".join(out)

    def __len__(self):
        return self.vocab_size
