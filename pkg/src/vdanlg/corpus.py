"""Dialogue acts, (de)lexicalisation, vocabularies and JSON-lines datasets."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PAD, BOS, EOS, UNK = "<pad>", "<s>", "</s>", "<unk>"
RESERVED = (PAD, BOS, EOS, UNK)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3

BINARY_VALUES = frozenset({"true", "false", "yes", "no"})
DELEX_VALUE = "VAL_DELEX"

_SLOT_NAME_RE = re.compile(r"^[a-z][a-z0-9_]*$")
_PUNCT_RE = re.compile(r"\s*([,.!?;:])(?=\s|$)")


class DAParseError(ValueError):
    def __init__(self, msg: str, pos: int):
        super().__init__(f"{msg} at position {pos}")
        self.pos = pos


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class DialogueAct:
    act_type: str
    slots: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if not self.act_type:
            raise ValueError("act_type must be nonempty")
        for name, _ in self.slots:
            if not _SLOT_NAME_RE.match(name):
                raise ValueError(f"slot name {name!r} is not a lowercase identifier")

    def format(self) -> str:
        inner = "; ".join(f"{k}={_quote(v)}" for k, v in self.slots)
        return f"{self.act_type}({inner})"

    __str__ = format


def _quote(value: str) -> str:
    return f'"{value}"' if "'" in value else f"'{value}'"


def is_binary(value: str) -> bool:
    return value.strip().lower() in BINARY_VALUES


def slot_token(name: str) -> str:
    return f"SLOT_{name.upper()}"


def act_token(act_type: str) -> str:
    return f"ACT_{act_type.upper()}"


def value_token(value: str) -> str:
    return f"VAL_{value.strip().upper()}" if is_binary(value) else DELEX_VALUE


def parse_dialogue_act(text: str) -> DialogueAct:
    """Parse ``act(k='v'; k2='v2')``. Quotes may be ', " or a backtick-quote pair."""
    s = text.strip()
    open_at = s.find("(")
    if open_at < 0:
        raise DAParseError("missing '('", len(s))
    act = s[:open_at].strip()
    if not act:
        raise DAParseError("empty act type", 0)
    pos = open_at + 1
    slots: list[tuple[str, str]] = []

    def skip_ws(i):
        while i < len(s) and s[i].isspace():
            i += 1
        return i

    pos = skip_ws(pos)
    if pos < len(s) and s[pos] == ")":
        if s[pos + 1:].strip():
            raise DAParseError("trailing text after ')'", pos + 1)
        return DialogueAct(act, ())
    while True:
        pos = skip_ws(pos)
        if pos >= len(s):
            raise DAParseError("unbalanced parentheses: unexpected end of input", pos)
        eq = s.find("=", pos)
        stop = min((i for i in (s.find(";", pos), s.find(")", pos)) if i >= 0), default=-1)
        if eq < 0 or (stop >= 0 and stop < eq):
            raise DAParseError("missing '=' in slot", pos)
        name = s[pos:eq].strip()
        if not name:
            raise DAParseError("empty slot name", pos)
        pos = skip_ws(eq + 1)
        if pos >= len(s):
            raise DAParseError("unbalanced parentheses: unexpected end of input", pos)
        quote = s[pos]
        if quote in "'\"`":
            close = "'" if quote == "`" else quote
            end = s.find(close, pos + 1)
            if end < 0:
                raise DAParseError("unterminated quote", len(s))
            value = s[pos + 1:end]
            pos = skip_ws(end + 1)
        else:
            end = pos
            while end < len(s) and s[end] not in ";)":
                end += 1
            value = s[pos:end].strip()
            pos = end
        slots.append((name, value))
        if pos >= len(s):
            raise DAParseError("unbalanced parentheses: unexpected end of input", pos)
        if s[pos] == ";":
            pos += 1
            continue
        if s[pos] == ")":
            if s[pos + 1:].strip():
                raise DAParseError("trailing text after ')'", pos + 1)
            break
        raise DAParseError(f"unexpected character {s[pos]!r}", pos)
    try:
        return DialogueAct(act, tuple(slots))
    except ValueError as e:
        raise DAParseError(str(e), 0) from None


def tokenize(text: str) -> list[str]:
    return _PUNCT_RE.sub(r" \1", text).split()


def normalize(text: str) -> str:
    return " ".join(tokenize(text.lower()))


def delexicalize(raw: str, da: DialogueAct) -> list[str]:
    """Replace slot values by SLOT_<NAME> tokens, longest value first.

    Matching is case-insensitive and respects word boundaries; binary slot
    values stay lexical.
    """
    text = raw.lower()
    entries = [(v.lower(), name) for name, v in da.slots if v.strip() and not is_binary(v)]
    seen: set[str] = set()
    ordered = []
    for v, name in entries:
        if v not in seen:
            seen.add(v)
            ordered.append((v, name))
    ordered.sort(key=lambda e: -len(e[0]))
    placeholders: dict[str, str] = {}
    for i, (v, name) in enumerate(ordered):
        ph = f"\x00{i}\x00"
        pattern = re.compile(r"(?<![\w\x00])" + re.escape(v) + r"(?![\w\x00])")
        text, n = pattern.subn(f" {ph} ", text)
        if n:
            placeholders[ph] = slot_token(name)
    return [placeholders.get(t, t) for t in tokenize(text)]


def relexicalize(tokens: Sequence[str], da: DialogueAct) -> str:
    """Fill SLOT_<NAME> tokens with that slot's values, consumed in DA order."""
    queues: dict[str, list[str]] = {}
    for name, v in da.slots:
        queues.setdefault(slot_token(name), []).append(v)
    out = []
    for t in tokens:
        q = queues.get(t)
        out.append(q.pop(0) if q else t)
    return " ".join(out)


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.tokens[:4] != RESERVED:
            raise ValueError("reserved tokens must occupy ids 0..3")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate token in vocabulary")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self._index

    def id(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def ids(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def token(self, idx: int) -> str:
        return self.tokens[idx]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class Example:
    da: DialogueAct
    raw: str
    tokens: tuple[str, ...]
    domain: str = "source"

    @classmethod
    def from_raw(cls, da: DialogueAct, raw: str, domain: str = "source") -> "Example":
        if domain not in ("source", "target"):
            raise ValueError(f"domain must be source or target, got {domain!r}")
        return cls(da, raw, tuple(delexicalize(raw, da)), domain)


def da_tokens(da: DialogueAct) -> list[str]:
    toks = [act_token(da.act_type)]
    for name, v in da.slots:
        toks += [slot_token(name), value_token(v)]
    return toks


def build_vocab(examples: Iterable[Example], extra: Iterable[str] = ()) -> Vocab:
    """Reserved tokens, then every remaining token in sorted order."""
    found: set[str] = set(extra)
    for ex in examples:
        found.update(ex.tokens)
        found.update(da_tokens(ex.da))
    found.difference_update(RESERVED)
    return Vocab(RESERVED + tuple(sorted(found)))


def load_dataset(path: str | Path, domain: str | None = None) -> list[Example]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                da = parse_dialogue_act(rec["da"])
                ex = Example.from_raw(da, rec["ref"], domain or rec.get("domain", "source"))
            except (ValueError, KeyError, TypeError) as e:
                raise DatasetError(f"{path}:{lineno}: malformed record: {e}") from None
            out.append(ex)
    return out


def save_dataset(path: str | Path, examples: Iterable[Example]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            rec = {"da": ex.da.format(), "ref": ex.raw, "domain": ex.domain}
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def load_acts(path: str | Path) -> list[DialogueAct]:
    """Dialogue acts for generation: JSON lines with a "da" field, or bare DA strings."""
    acts = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                text = json.loads(line)["da"] if line.startswith("{") else line
                acts.append(parse_dialogue_act(text))
            except (ValueError, KeyError) as e:
                raise DatasetError(f"{path}:{lineno}: malformed dialogue act: {e}") from None
    return acts
