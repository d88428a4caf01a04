"""Deterministic rule-based natural language understanding.

Replaces a hosted NLU service behind the same conceptual interface: every
utterance becomes a :class:`MessageUnderstanding` (intent, confidence,
typed parameters). Intents are scored against keyword patterns from the
content pack, entities are pulled by small dedicated extractors, and the
whole thing is a pure function of (text, language, reference time, pack).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from .content import ContentPack

FALLBACK_INTENT = "fallback"
CHOICE_INTENT = "choice_selected"
MEDIA_INTENT = "media"

DAMAGE_TYPES = ("display_damage", "water_damage", "theft", "other")

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)
_PLACEHOLDER_RE = re.compile(r"^\{\w+\}$")

# Main emoji blocks plus a few singletons that sit outside them.
_EMOJI_RANGES = (
    (0x1F300, 0x1F5FF),
    (0x1F600, 0x1F64F),
    (0x1F680, 0x1F6FF),
    (0x1F900, 0x1F9FF),
    (0x1FA70, 0x1FAFF),
    (0x2600, 0x26FF),
    (0x2700, 0x27BF),
)
_EMOJI_EXTRAS = {0x2764, 0x2B50, 0x2B55, 0x1F004}


class NluError(Exception):
    pass


class ContentPackMissing(NluError):
    """No intent inventory is loaded for the requested language."""


@dataclass(frozen=True)
class EntityValue:
    """A typed value extracted from an utterance.

    ``kind`` is one of datetime, damage_type, phone_model, imei,
    phone_number or text; ``value`` is the canonical payload for that kind
    (ISO date string for datetime). IMEI values are validated at
    construction, so an EntityValue of kind imei is always Luhn-clean.
    """

    kind: str
    value: str
    granularity: str | None = None

    def __post_init__(self) -> None:
        if self.kind == "imei":
            check = validate_imei(self.value)
            if not check.valid:
                raise ValueError(f"invalid imei: {check.reason}")

    def render(self) -> str:
        return self.value


@dataclass(frozen=True)
class ParameterSpec:
    name: str
    entity_type: str
    required: bool = False


@dataclass(frozen=True)
class IntentDefinition:
    name: str
    patterns: tuple[str, ...]
    parameters: tuple[ParameterSpec, ...] = ()

    def __post_init__(self) -> None:
        if not self.patterns:
            raise ValueError(f"intent {self.name!r} has no trigger patterns")
        names = [p.name for p in self.parameters]
        if len(set(names)) != len(names):
            raise ValueError(f"intent {self.name!r} has duplicate parameter names")


@dataclass(frozen=True)
class MessageUnderstanding:
    intent: str
    confidence: float
    parameters: dict[str, EntityValue] = field(default_factory=dict)
    raw_text: str = ""
    language: str = "de"
    media_kind: str | None = None
    emojis: tuple[str, ...] = ()


def tokenize(text: str) -> list[str]:
    """Lowercase word tokens; punctuation split away, umlauts preserved."""
    return _TOKEN_RE.findall(text.lower())


def score_intent(tokens: list[str], definition: IntentDefinition, stopwords: frozenset[str]) -> float:
    """Score one intent against utterance tokens.

    An exact token-sequence match with any trigger phrase scores 1.0;
    otherwise the score is the fraction of the best pattern's content
    tokens (stopwords and slot placeholders excluded) present in the
    utterance, order-insensitive.
    """
    token_set = set(tokens)
    best = 0.0
    for pattern in definition.patterns:
        raw_parts = pattern.split()
        content_parts = [p for p in raw_parts if not _PLACEHOLDER_RE.match(p)]
        pattern_tokens = tokenize(" ".join(content_parts))
        if not pattern_tokens:
            continue
        if pattern_tokens == tokens:
            return 1.0
        content = [t for t in pattern_tokens if t not in stopwords]
        if not content:
            continue
        hits = sum(1 for t in content if t in token_set)
        best = max(best, hits / len(content))
    return best


@dataclass(frozen=True)
class ImeiCheck:
    valid: bool
    reason: str | None = None


def luhn_checksum_ok(digits: str) -> bool:
    total = 0
    for i, ch in enumerate(reversed(digits)):
        d = int(ch)
        if i % 2 == 1:
            d *= 2
            if d > 9:
                d -= 9
        total += d
    return total % 10 == 0


def validate_imei(digits: str) -> ImeiCheck:
    """A device identifier is valid iff it is exactly 15 digits and the
    Luhn checksum holds."""
    if len(digits) != 15:
        return ImeiCheck(False, "wrong_length")
    if not digits.isdigit():
        return ImeiCheck(False, "non_digit")
    if not luhn_checksum_ok(digits):
        return ImeiCheck(False, "checksum_failed")
    return ImeiCheck(True)


def _is_emoji(cp: int) -> bool:
    if cp in _EMOJI_EXTRAS:
        return True
    return any(lo <= cp <= hi for lo, hi in _EMOJI_RANGES)


def extract_emojis(text: str) -> tuple[str, ...]:
    """Emoji scalar values in textual order (duplicates preserved)."""
    return tuple(ch for ch in text if _is_emoji(ord(ch)))


_ISO_DATE_RE = re.compile(r"\b(\d{4})-(\d{2})-(\d{2})\b")
_DOTTED_DATE_RE = re.compile(r"\b(\d{1,2})\.(\d{1,2})\.(\d{4})\b")
_DAYS_AGO_EN_RE = re.compile(r"\b(\d+)\s+days?\s+ago\b", re.IGNORECASE)
_DAYS_AGO_DE_RE = re.compile(r"\bvor\s+(\d+)\s+tag(?:en)?\b", re.IGNORECASE)


def _day_value(moment: datetime) -> EntityValue:
    return EntityValue(kind="datetime", value=moment.date().isoformat(), granularity="day")


def extract_datetime(text: str, language: str, reference_time: datetime) -> EntityValue | None:
    """Resolve a point in time from an answer, at day granularity.

    Supported: today/heute, yesterday/gestern, "N days ago" / "vor N
    Tagen", ISO dates, and day-first dotted dates (D.M.YYYY). Returns
    None when nothing matches.
    """
    lowered = text.lower()
    m = _ISO_DATE_RE.search(text)
    if m:
        try:
            return _day_value(datetime(int(m.group(1)), int(m.group(2)), int(m.group(3)), tzinfo=timezone.utc))
        except ValueError:
            return None
    m = _DOTTED_DATE_RE.search(text)
    if m:
        try:
            return _day_value(datetime(int(m.group(3)), int(m.group(2)), int(m.group(1)), tzinfo=timezone.utc))
        except ValueError:
            return None
    m = _DAYS_AGO_EN_RE.search(lowered) or _DAYS_AGO_DE_RE.search(lowered)
    if m:
        return _day_value(reference_time - timedelta(days=int(m.group(1))))
    tokens = set(tokenize(text))
    if "today" in tokens or "heute" in tokens:
        return _day_value(reference_time)
    if "yesterday" in tokens or "gestern" in tokens:
        return _day_value(reference_time - timedelta(days=1))
    if "vorgestern" in tokens:
        return _day_value(reference_time - timedelta(days=2))
    return None


_DIGIT_RUN_RE = re.compile(r"\+?\d[\d\s\-/().]*\d")


def _digit_runs(text: str) -> list[str]:
    return ["".join(ch for ch in m.group(0) if ch.isdigit()) for m in _DIGIT_RUN_RE.finditer(text)]


def extract_imei_candidate(text: str) -> str | None:
    """First digit run that could be an IMEI (length checked, not checksum)."""
    runs = _digit_runs(text)
    for run in runs:
        if len(run) == 15:
            return run
    return runs[0] if runs else None


def extract_phone_number(text: str) -> EntityValue | None:
    for run in _digit_runs(text):
        if 6 <= len(run) <= 15:
            return EntityValue(kind="phone_number", value=run)
    return None


def _token_run_in(needle: list[str], haystack: list[str]) -> bool:
    n = len(needle)
    if n == 0:
        return False
    return any(haystack[i : i + n] == needle for i in range(len(haystack) - n + 1))


def extract_damage_type(text: str, synonyms: dict[str, tuple[str, ...]]) -> EntityValue | None:
    """Keyword lookup against the per-category synonym lists."""
    tokens = tokenize(text)
    for category in DAMAGE_TYPES:
        for phrase in synonyms.get(category, ()):
            if _token_run_in(tokenize(phrase), tokens):
                return EntityValue(kind="damage_type", value=category)
    return None


def match_phone_models(text: str, catalog: tuple[str, ...]) -> list[str]:
    """Case-insensitive catalog lookup, tolerant of partial mentions.

    A full model name present as a token run is an exact hit; a bare
    brand mention (the model's first token) is a partial hit. Exact hits
    win; multiple partial hits are returned as-is so the dialog can
    disambiguate with a multiple-choice prompt.
    """
    tokens = tokenize(text)
    exact: list[str] = []
    partial: list[str] = []
    for model in catalog:
        model_tokens = tokenize(model)
        if _token_run_in(model_tokens, tokens):
            exact.append(model)
        elif model_tokens and model_tokens[0] in tokens:
            partial.append(model)
    return exact if exact else partial


_NAME_RE = re.compile(
    r"(?:my name is|i am called|i'm called|call me|ich hei(?:ß|ss)e|mein name ist|ich bin)\s+"
    r"([A-ZÄÖÜ][\wäöüß-]*)",
    re.IGNORECASE,
)


def extract_person_name(text: str) -> EntityValue | None:
    m = _NAME_RE.search(text)
    if not m:
        return None
    return EntityValue(kind="text", value=m.group(1).capitalize())


def extract_slot_reference(text: str, slot_synonyms: dict[str, tuple[str, ...]]) -> EntityValue | None:
    """Resolve a slot mention; the longest matching synonym wins, so
    "phone number" beats a bare "phone"."""
    tokens = tokenize(text)
    best: str | None = None
    best_length = 0
    for slot, phrases in slot_synonyms.items():
        for phrase in phrases:
            phrase_tokens = tokenize(phrase)
            if len(phrase_tokens) > best_length and _token_run_in(phrase_tokens, tokens):
                best, best_length = slot, len(phrase_tokens)
    return EntityValue(kind="text", value=best) if best else None


class Nlu:
    """Intent scoring and parameter extraction over loaded content packs."""

    def __init__(self, packs: dict[str, "ContentPack"]):
        if not packs:
            raise ContentPackMissing("no content packs loaded")
        self._packs = packs

    def pack_for(self, language: str) -> "ContentPack":
        try:
            return self._packs[language]
        except KeyError:
            raise ContentPackMissing(f"no content pack for language {language!r}") from None

    def understand(self, text: str, language: str, reference_time: datetime) -> MessageUnderstanding:
        """Classify one utterance and extract its declared parameters.

        The highest-scoring intent wins; ties go to the intent declared
        earliest in the pack. Below the pack's fallback threshold the
        reserved ``fallback`` intent is returned with the best score as
        confidence. Emojis are extracted regardless of intent.
        """
        pack = self.pack_for(language)
        tokens = tokenize(text)
        emojis = extract_emojis(text)

        best_intent: IntentDefinition | None = None
        best_score = 0.0
        for definition in pack.intents:
            if definition.name in (CHOICE_INTENT, MEDIA_INTENT):
                continue  # synthetic intents are never matched from text
            score = score_intent(tokens, definition, pack.stopwords)
            if score > best_score:
                best_intent, best_score = definition, score

        if best_intent is None or best_score < pack.fallback_threshold:
            return MessageUnderstanding(
                intent=FALLBACK_INTENT,
                confidence=best_score,
                raw_text=text,
                language=language,
                emojis=emojis,
            )

        parameters: dict[str, EntityValue] = {}
        for spec in best_intent.parameters:
            value = self.extract_entity(spec.entity_type, text, language, reference_time)
            if value is not None:
                parameters[spec.name] = value
        return MessageUnderstanding(
            intent=best_intent.name,
            confidence=best_score,
            parameters=parameters,
            raw_text=text,
            language=language,
            emojis=emojis,
        )

    def extract_entity(
        self, entity_type: str, text: str, language: str, reference_time: datetime
    ) -> EntityValue | None:
        """Run the extractor for one entity type; None when absent.

        phone_model extraction at the intent level only accepts an
        unambiguous catalog hit; ambiguous mentions are left for the
        questionnaire's clarification prompt.
        """
        pack = self.pack_for(language)
        if entity_type == "datetime":
            return extract_datetime(text, language, reference_time)
        if entity_type == "damage_type":
            return extract_damage_type(text, pack.entities.damage_synonyms)
        if entity_type == "phone_model":
            hits = match_phone_models(text, pack.entities.phone_catalog)
            if len(hits) == 1:
                return EntityValue(kind="phone_model", value=hits[0])
            return None
        if entity_type == "imei":
            candidate = extract_imei_candidate(text)
            if candidate and validate_imei(candidate).valid:
                return EntityValue(kind="imei", value=candidate)
            return None
        if entity_type == "phone_number":
            return extract_phone_number(text)
        if entity_type == "person_name":
            return extract_person_name(text)
        if entity_type == "slot_name":
            return extract_slot_reference(text, pack.entities.slot_synonyms)
        if entity_type in ("text", "confirmation"):
            stripped = text.strip()
            return EntityValue(kind="text", value=stripped) if stripped else None
        raise NluError(f"unknown entity type {entity_type!r}")


def choice_understanding(choice_id: str, language: str) -> MessageUnderstanding:
    """Synthetic understanding for a choice-button press."""
    return MessageUnderstanding(
        intent=CHOICE_INTENT,
        confidence=1.0,
        parameters={"choice_id": EntityValue(kind="text", value=choice_id)},
        raw_text=f"[choice:{choice_id}]",
        language=language,
    )


def media_understanding(kind: str, language: str) -> MessageUnderstanding:
    """Synthetic understanding for a media message (no transcription)."""
    return MessageUnderstanding(
        intent=MEDIA_INTENT,
        confidence=1.0,
        raw_text=f"[media:{kind}]",
        language=language,
        media_kind=kind,
    )
