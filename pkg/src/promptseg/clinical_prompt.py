"""Rule-based tumor prompt extraction from radiology transcripts.

The pipeline is: tokenize, match synonym phrases against a controlled
vocabulary, check the whole transcript for a global negative cue, otherwise
apply NegEx-style trigger/scope negation to each mention, and take the
earliest surviving mention as the case class.  No fuzzy matching is done:
an unrecognized spelling yields ``healthy``.
"""
from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Sequence

from .fileio import SCHEMA_VERSION

RULES_DIR_ENV = "PROMPTSEG_RULES_DIR"
NO_MATCH_EVIDENCE = "no target tumor term found"
HEALTHY = "healthy"
EXPECTED_CLASSES = ("glioma", "meningioma", "pituitary", "healthy")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


@dataclass(frozen=True)
class Token:
    text: str  # lowercased
    start: int
    end: int


def normalize_text(text: str) -> list[Token]:
    """Lowercased word and punctuation tokens with character spans into ``text``."""
    return [Token(m.group().lower(), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


def _phrase(s: str) -> tuple[str, ...]:
    return tuple(t.text for t in normalize_text(s))


def _reject_duplicate_keys(pairs: list[tuple[str, Any]]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for k, v in pairs:
        if k in out:
            raise ValueError(f"surface form {k!r} listed twice")
        out[k] = v
    return out


@dataclass(frozen=True)
class VocabularyMap:
    classes: tuple[str, ...]
    synonyms: dict[str, str]
    healthy_label: str = HEALTHY
    near_miss_prefixes: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "near_miss_prefixes", tuple(self.near_miss_prefixes))
        if sorted(self.classes) != sorted(EXPECTED_CLASSES) or len(set(self.classes)) != len(self.classes):
            raise ValueError(f"classes must be exactly {EXPECTED_CLASSES}, got {self.classes}")
        if self.healthy_label not in self.classes:
            raise ValueError("healthy_label must be one of the classes")
        for surface, cls in self.synonyms.items():
            if surface != surface.lower():
                raise ValueError(f"surface form {surface!r} must be lowercase")
            if cls not in self.classes or cls == self.healthy_label:
                raise ValueError(f"synonym {surface!r} maps to {cls!r}, not a tumor class")
        phrases: dict[tuple[str, ...], str] = {}
        for surface, cls in self.synonyms.items():
            key = _phrase(surface)
            if key in phrases and phrases[key] != cls:
                raise ValueError(f"surface form {surface!r} maps to two classes")
            phrases[key] = cls
        object.__setattr__(self, "_phrases", phrases)

    @property
    def phrases(self) -> dict[tuple[str, ...], str]:
        return self._phrases  # type: ignore[attr-defined]

    def with_synonym(self, surface: str, cls: str) -> "VocabularyMap":
        syn = dict(self.synonyms)
        syn[surface.lower()] = cls
        return VocabularyMap(self.classes, syn, self.healthy_label, self.near_miss_prefixes)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "VocabularyMap":
        return cls(tuple(d["classes"]), dict(d["synonyms"]), d.get("healthy_label", HEALTHY),
                   tuple(d.get("near_miss_prefixes", ())))

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "classes": list(self.classes),
            "healthy_label": self.healthy_label,
            "synonyms": dict(self.synonyms),
            "near_miss_prefixes": list(self.near_miss_prefixes),
        }


@dataclass(frozen=True)
class NegationRules:
    global_cues: tuple[str, ...]
    pre_triggers: tuple[str, ...]
    post_triggers: tuple[str, ...]
    terminators: tuple[str, ...]
    scope_window: int = 5

    def __post_init__(self) -> None:
        for name in ("global_cues", "pre_triggers", "post_triggers", "terminators"):
            items = tuple(getattr(self, name))
            object.__setattr__(self, name, items)
            if not items:
                raise ValueError(f"{name} must not be empty")
            for item in items:
                if item != item.lower() or not item.strip():
                    raise ValueError(f"{name}: {item!r} must be non-empty lowercase")
        if int(self.scope_window) != self.scope_window or self.scope_window < 1:
            raise ValueError("scope_window must be an integer >= 1")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "NegationRules":
        return cls(tuple(d["global_cues"]), tuple(d["pre_triggers"]), tuple(d["post_triggers"]),
                   tuple(d["terminators"]), int(d["scope_window"]))

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "global_cues": list(self.global_cues),
            "pre_triggers": list(self.pre_triggers),
            "post_triggers": list(self.post_triggers),
            "terminators": list(self.terminators),
            "scope_window": self.scope_window,
        }


def _read_pack(path: str | Path | None, filename: str) -> dict[str, Any]:
    if path is None:
        env_dir = os.environ.get(RULES_DIR_ENV)
        if env_dir:
            path = Path(env_dir) / filename
        else:
            return json.loads(resources.files("promptseg.data").joinpath(filename).read_text(encoding="utf-8"),
                              object_pairs_hook=_reject_duplicate_keys)
    return json.loads(Path(path).read_text(encoding="utf-8"), object_pairs_hook=_reject_duplicate_keys)


def load_vocabulary(path: str | Path | None = None) -> VocabularyMap:
    """Load a vocabulary pack; ``None`` means ``$PROMPTSEG_RULES_DIR/vocab.json`` or the bundled one."""
    return VocabularyMap.from_dict(_read_pack(path, "vocab.json"))


def load_rules(path: str | Path | None = None) -> NegationRules:
    return NegationRules.from_dict(_read_pack(path, "rules.json"))


@dataclass
class EntityMention:
    surface: str
    canonical: str
    start: int
    end: int
    token_start: int
    token_end: int  # exclusive
    negated: bool = False
    negation_trigger: str | None = None

    def __post_init__(self) -> None:
        if self.end <= self.start:
            raise ValueError("mention span must be non-empty")

    def to_dict(self) -> dict[str, Any]:
        return {
            "surface": self.surface,
            "canonical": self.canonical,
            "span": [self.start, self.end],
            "negated": self.negated,
            "negation_trigger": self.negation_trigger,
        }


@dataclass
class PromptExtraction:
    case_id: str
    class_label: str
    negated: bool
    evidence: str
    prompt: str
    mentions: list[EntityMention] = field(default_factory=list)

    def to_record(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "case_id": self.case_id,
            "class": self.class_label,
            "negated": self.negated,
            "evidence": self.evidence,
            "prompt": self.prompt,
            "mentions": [m.to_dict() for m in self.mentions],
        }


@dataclass(frozen=True)
class Transcript:
    case_id: str
    text: str

    def __post_init__(self) -> None:
        if not self.case_id:
            raise ValueError("case_id must be non-empty")

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "Transcript":
        if "case_id" not in rec:
            raise KeyError("case_id")
        text = rec.get("text") or ""
        if not isinstance(text, str):
            raise ValueError("text must be a string")
        return cls(str(rec["case_id"]), text)


def _find_phrases(words: Sequence[str], phrases: Iterable[tuple[str, ...]]) -> list[tuple[int, int, tuple[str, ...]]]:
    """Non-overlapping phrase hits, preferring longer and then earlier matches."""
    hits = []
    for ph in set(phrases):
        n = len(ph)
        if n == 0:
            continue
        for i in range(len(words) - n + 1):
            if tuple(words[i : i + n]) == ph:
                hits.append((i, i + n, ph))
    hits.sort(key=lambda h: (-(h[1] - h[0]), h[0]))
    taken = [False] * len(words)
    chosen = []
    for s, e, ph in hits:
        if not any(taken[s:e]):
            for k in range(s, e):
                taken[k] = True
            chosen.append((s, e, ph))
    chosen.sort()
    return chosen


def find_mentions(tokens: Sequence[Token], vocab: VocabularyMap, text: str | None = None) -> list[EntityMention]:
    words = [t.text for t in tokens]
    mentions = []
    for s, e, ph in _find_phrases(words, vocab.phrases):
        start, end = tokens[s].start, tokens[e - 1].end
        surface = text[start:end] if text is not None else " ".join(ph)
        mentions.append(EntityMention(surface, vocab.phrases[ph], start, end, s, e))
    return mentions


def detect_global_negation(text: str, rules: NegationRules) -> str | None:
    """The earliest global cue present as a whole-token phrase, else ``None``."""
    words = [t.text for t in normalize_text(text)]
    best: tuple[int, int, str] | None = None
    for cue in rules.global_cues:
        ph = _phrase(cue)
        n = len(ph)
        for i in range(len(words) - n + 1):
            if tuple(words[i : i + n]) == ph:
                key = (i, -n, cue)
                if best is None or key < best:
                    best = key
                break
    return None if best is None else best[2]


def apply_entity_negation(tokens: Sequence[Token], mentions: list[EntityMention], rules: NegationRules) -> list[EntityMention]:
    """Mark mentions negated by a nearby trigger with no terminator in between."""
    words = [t.text for t in tokens]
    terminators = set(rules.terminators)
    pre = _find_phrases(words, [_phrase(p) for p in rules.pre_triggers])
    post = _find_phrases(words, [_phrase(p) for p in rules.post_triggers])
    window = rules.scope_window

    def clear(a: int, b: int) -> bool:
        return not any(w in terminators for w in words[a:b])

    for m in mentions:
        trigger = None
        # nearest preceding trigger first
        for s, e, ph in reversed(pre):
            if e <= m.token_start and m.token_start - e < window and clear(e, m.token_start):
                trigger = " ".join(ph)
                break
        if trigger is None:
            for s, e, ph in post:
                if s >= m.token_end and s - m.token_end < window and clear(m.token_end, s):
                    trigger = " ".join(ph)
                    break
        m.negated = trigger is not None
        m.negation_trigger = trigger
    return mentions


def _near_miss(tokens: Sequence[Token], mentions: Sequence[EntityMention], vocab: VocabularyMap, text: str) -> str | None:
    covered = {k for m in mentions for k in range(m.token_start, m.token_end)}
    for i, t in enumerate(tokens):
        if i in covered or not t.text.isalpha():
            continue
        if any(t.text.startswith(p) for p in vocab.near_miss_prefixes):
            return text[t.start : t.end].lower()
    return None


def render_prompt(class_label: str, negated: bool = False, vocab: VocabularyMap | None = None) -> str:
    """Tumor classes render as their bare class word; healthy or negated render as ``healthy``."""
    classes = vocab.classes if vocab is not None else EXPECTED_CLASSES
    healthy = vocab.healthy_label if vocab is not None else HEALTHY
    if class_label not in classes:
        raise ValueError(f"unknown class {class_label!r}")
    if class_label == healthy or negated:
        return healthy
    return class_label


def extract(transcript: Transcript, vocab: VocabularyMap, rules: NegationRules) -> PromptExtraction:
    text = transcript.text
    tokens = normalize_text(text)
    mentions = find_mentions(tokens, vocab, text)
    cue = detect_global_negation(text, rules)
    if cue is not None:
        for m in mentions:
            m.negated = True
            m.negation_trigger = cue
    else:
        apply_entity_negation(tokens, mentions, rules)

    healthy = vocab.healthy_label
    live = [m for m in mentions if not m.negated]
    if live:
        first = min(live, key=lambda m: m.start)
        label, negated, evidence = first.canonical, False, first.surface.lower()
    elif cue is not None:
        label, negated, evidence = healthy, True, cue
    elif mentions:
        first = min(mentions, key=lambda m: m.start)
        label, negated, evidence = healthy, True, first.negation_trigger or NO_MATCH_EVIDENCE
    else:
        label, negated = healthy, False
        evidence = _near_miss(tokens, mentions, vocab, text) or NO_MATCH_EVIDENCE
    return PromptExtraction(transcript.case_id, label, negated, evidence,
                            render_prompt(label, False, vocab), mentions)
