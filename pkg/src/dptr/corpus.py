"""Label corpus, prompt templating and character-level tokenization.

A single vocabulary serves both the dual encoder's text tower and the
decoder's target side. Ids ``0..38`` double as decoder output classes
(``[EOS]`` plus 38 symbols), so logits columns map directly onto ids.
"""

from __future__ import annotations

import json
import re
import string
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

SYMBOLS = string.digits + string.ascii_lowercase + " '"
EOS = 0
BOS = len(SYMBOLS) + 1
PAD = len(SYMBOLS) + 2
VOCAB_SIZE = len(SYMBOLS) + 3
NUM_CLASSES = len(SYMBOLS) + 1  # S + 1

DEFAULT_MAX_LEN = 12
DEFAULT_PROMPT_BUDGET = 24

_CHAR_TO_ID = {c: i + 1 for i, c in enumerate(SYMBOLS)}
_ID_TO_CHAR = {i: c for c, i in _CHAR_TO_ID.items()}
_LABEL_RE = re.compile(r"^[a-z0-9]+$")


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class LabelCorpus:
    labels: tuple[str, ...]
    max_len: int

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels):
            raise CorpusError("labels not unique")
        for label in self.labels:
            if not label or len(label) > self.max_len:
                raise CorpusError(f"label {label!r} violates length bounds")

    def __len__(self):
        return len(self.labels)

    def __iter__(self):
        return iter(self.labels)


@dataclass(frozen=True)
class TokenSeq:
    ids: tuple[int, ...]
    kind: str  # "prompt" | "target"

    def __len__(self):
        return len(self.ids)


def dedup_and_load(raw: Sequence[str], max_len: int = DEFAULT_MAX_LEN) -> LabelCorpus:
    """Case-fold, drop over-long or non-alphanumeric labels and de-duplicate.

    First-occurrence order is kept. Labels with characters outside
    ``[a-z0-9]`` (including the quote used by the prompt template) are dropped.
    """
    if not raw:
        raise CorpusError("empty corpus")
    seen: dict[str, None] = {}
    for item in raw:
        label = item.strip().lower()
        if not label or len(label) > max_len or not _LABEL_RE.match(label):
            continue
        seen.setdefault(label, None)
    if not seen:
        raise CorpusError("empty corpus")
    return LabelCorpus(tuple(seen), max_len)


def load_labels(path: str | Path, max_len: int = DEFAULT_MAX_LEN) -> LabelCorpus:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return dedup_and_load(lines, max_len)


def toy_wordlist() -> list[str]:
    """The bundled 500-line toy word list (contains 20 case/duplicate repeats)."""
    from importlib.resources import files

    text = files("dptr").joinpath("data/toy_words.txt").read_text(encoding="utf-8")
    return text.splitlines()


def make_prompt(label: str) -> str:
    if not label:
        raise CorpusError("label must be nonempty")
    return f"a photo of a '{label}'"


def _char_ids(text: str) -> list[int]:
    try:
        return [_CHAR_TO_ID[c] for c in text]
    except KeyError as exc:
        raise CorpusError(f"unknown symbol {exc.args[0]!r}") from None


def tokenize_prompt(prompt: str, budget: int = DEFAULT_PROMPT_BUDGET) -> TokenSeq:
    """Fixed-width prompt ids: ``budget`` symbol/pad slots then a trailing ``[EOS]``."""
    ids = _char_ids(prompt)[:budget]
    ids += [PAD] * (budget - len(ids))
    ids.append(EOS)
    return TokenSeq(tuple(ids), "prompt")


def encode_target(label: str, max_len: int = DEFAULT_MAX_LEN) -> TokenSeq:
    if len(label) > max_len:
        raise CorpusError(f"label {label!r} longer than max_len={max_len}")
    ids = [BOS, *_char_ids(label), EOS]
    ids += [PAD] * (max_len + 2 - len(ids))
    return TokenSeq(tuple(ids), "target")


def ids_to_text(ids: Iterable[int]) -> str:
    """Map class ids to characters, stopping at the first ``[EOS]``. ``[BOS]``/pad are skipped."""
    out = []
    for i in ids:
        i = int(i)
        if i == EOS:
            break
        if i in _ID_TO_CHAR:
            out.append(_ID_TO_CHAR[i])
    return "".join(out)


def decode_target(seq: TokenSeq) -> str:
    if seq.kind != "target" or not seq.ids or seq.ids[0] != BOS:
        raise CorpusError("not a target sequence")
    return ids_to_text(seq.ids[1:])


def vocabulary() -> dict[str, int]:
    vocab = {"[EOS]": EOS}
    vocab.update(_CHAR_TO_ID)
    vocab["[BOS]"] = BOS
    vocab["[PAD]"] = PAD
    return vocab


def write_vocabulary(path: str | Path) -> None:
    Path(path).write_text(json.dumps(vocabulary(), indent=1, sort_keys=False), encoding="utf-8")
