"""Content pack loading and validation.

All conversational content is data: intents, entity lexicons, dialog
states and rules, the questionnaire, and response templates live in one
YAML document per language. Dialog designers edit packs, not code. The
loader reports structural problems; :func:`validate_pack` runs the
semantic checks behind the ``validate-content`` command.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .nlu import DAMAGE_TYPES, IntentDefinition, ParameterSpec

ENTITY_TYPES = (
    "datetime",
    "damage_type",
    "phone_model",
    "imei",
    "phone_number",
    "text",
    "confirmation",
    "person_name",
    "slot_name",
)

HANDLER_KINDS = ("intent", "affirmation", "negation", "media", "emoji", "regex")

_TEMPLATE_PLACEHOLDER_RE = re.compile(r"\{(\w+)\}")


class PackError(Exception):
    """The pack document cannot even be loaded into the schema."""


@dataclass(frozen=True)
class ChoiceSpec:
    choice_id: str
    label: str
    canonical_value: str


@dataclass(frozen=True)
class QuestionSpec:
    """One questionnaire entry: which slot it fills and how it is asked."""

    id: str
    slot: str
    prompt_key: str
    entity_type: str
    help_key: str
    example_key: str
    optional: bool = False
    clarification_choices: tuple[ChoiceSpec, ...] = ()


@dataclass(frozen=True)
class TemplateEntry:
    variants: dict[str, tuple[str, ...]]
    negative_mood: dict[str, tuple[str, ...]] = field(default_factory=dict)
    params: tuple[str, ...] = ()


@dataclass(frozen=True)
class StateDecl:
    lifetime: int | None = None
    priority: int = 0


@dataclass(frozen=True)
class EntityCatalog:
    damage_synonyms: dict[str, tuple[str, ...]]
    damage_labels: dict[str, str]
    phone_catalog: tuple[str, ...]
    slot_synonyms: dict[str, tuple[str, ...]]
    emoji_positive: frozenset[str]
    emoji_negative: frozenset[str]


@dataclass(frozen=True)
class ContentPack:
    language: str
    fallback_threshold: float
    persona_name: str
    stopwords: frozenset[str]
    intents: tuple[IntentDefinition, ...]
    affirmation_intents: tuple[str, ...]
    negation_intents: tuple[str, ...]
    entities: EntityCatalog
    states: dict[str, StateDecl]
    rules: dict
    questions: tuple[QuestionSpec, ...]
    templates: dict[str, TemplateEntry]

    def question_by_slot(self, slot: str) -> QuestionSpec | None:
        for q in self.questions:
            if q.slot == slot:
                return q
        return None

    def intent_names(self) -> set[str]:
        return {i.name for i in self.intents}


def _as_str_tuple(value, what: str) -> tuple[str, ...]:
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise PackError(f"{what} must be a list of strings")
    return tuple(value)


def _build_intents(raw, problems: list[str]) -> tuple[IntentDefinition, ...]:
    intents = []
    for entry in raw or []:
        name = entry.get("name", "<unnamed>")
        try:
            parameters = tuple(
                ParameterSpec(
                    name=p["name"],
                    entity_type=p["entity_type"],
                    required=bool(p.get("required", False)),
                )
                for p in entry.get("parameters", [])
            )
            intents.append(
                IntentDefinition(
                    name=entry["name"],
                    patterns=tuple(entry.get("patterns", [])),
                    parameters=parameters,
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            problems.append(f"intent {name!r}: {exc}")
    return tuple(intents)


def _build_questions(raw, problems: list[str]) -> tuple[QuestionSpec, ...]:
    questions = []
    for entry in raw or []:
        qid = entry.get("id", "<unnamed>")
        try:
            choices = tuple(
                ChoiceSpec(
                    choice_id=c["choice_id"],
                    label=c["label"],
                    canonical_value=c["canonical_value"],
                )
                for c in entry.get("clarification_choices", [])
            )
            questions.append(
                QuestionSpec(
                    id=entry["id"],
                    slot=entry["slot"],
                    prompt_key=entry["prompt_key"],
                    entity_type=entry["entity_type"],
                    help_key=entry["help_key"],
                    example_key=entry["example_key"],
                    optional=bool(entry.get("optional", False)),
                    clarification_choices=choices,
                )
            )
        except (KeyError, TypeError) as exc:
            problems.append(f"question {qid!r}: missing field {exc}")
    return tuple(questions)


def _build_templates(raw, problems: list[str]) -> dict[str, TemplateEntry]:
    templates: dict[str, TemplateEntry] = {}
    for key, entry in (raw or {}).items():
        if not isinstance(entry, dict):
            problems.append(f"template {key!r}: must be a mapping")
            continue
        variants: dict[str, tuple[str, ...]] = {}
        for formality in ("formal", "informal"):
            if formality in entry:
                try:
                    variants[formality] = _as_str_tuple(entry[formality], f"template {key!r} {formality}")
                except PackError as exc:
                    problems.append(str(exc))
        negative: dict[str, tuple[str, ...]] = {}
        for formality, texts in (entry.get("negative_mood") or {}).items():
            try:
                negative[formality] = _as_str_tuple(texts, f"template {key!r} negative_mood {formality}")
            except PackError as exc:
                problems.append(str(exc))
        templates[key] = TemplateEntry(
            variants=variants,
            negative_mood=negative,
            params=tuple(entry.get("params", [])),
        )
    return templates


def load_pack(path: str | Path) -> ContentPack:
    """Parse one pack document; raises PackError listing every structural
    problem found."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise PackError(f"cannot read pack {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise PackError(f"pack {path} must be a mapping")

    problems: list[str] = []
    language = raw.get("language")
    if not isinstance(language, str) or not language:
        problems.append("language must be a non-empty string")
        language = "??"

    entities_raw = raw.get("entities") or {}
    damage_synonyms: dict[str, tuple[str, ...]] = {}
    damage_labels: dict[str, str] = {}
    for category, spec in (entities_raw.get("damage_types") or {}).items():
        damage_labels[category] = spec.get("label", category)
        try:
            damage_synonyms[category] = _as_str_tuple(spec.get("synonyms", []), f"damage_types.{category}")
        except PackError as exc:
            problems.append(str(exc))
    emoji_raw = entities_raw.get("emoji_sentiment") or {}
    entities = EntityCatalog(
        damage_synonyms=damage_synonyms,
        damage_labels=damage_labels,
        phone_catalog=tuple(entities_raw.get("phone_models", [])),
        slot_synonyms={
            slot: tuple(phrases)
            for slot, phrases in (entities_raw.get("slot_synonyms") or {}).items()
        },
        emoji_positive=frozenset(emoji_raw.get("positive", [])),
        emoji_negative=frozenset(emoji_raw.get("negative", [])),
    )

    states: dict[str, StateDecl] = {}
    for name, decl in (raw.get("states") or {}).items():
        decl = decl or {}
        states[name] = StateDecl(
            lifetime=decl.get("lifetime"), priority=int(decl.get("priority", 0))
        )

    families = raw.get("families") or {}
    threshold = raw.get("fallback_threshold", 0.5)

    pack = ContentPack(
        language=language,
        fallback_threshold=float(threshold),
        persona_name=str(raw.get("persona_name") or ""),
        stopwords=frozenset(raw.get("stopwords") or []),
        intents=_build_intents(raw.get("intents"), problems),
        affirmation_intents=tuple(families.get("affirmation", [])),
        negation_intents=tuple(families.get("negation", [])),
        entities=entities,
        states=states,
        rules=raw.get("rules") or {},
        questions=_build_questions(raw.get("questions"), problems),
        templates=_build_templates(raw.get("templates"), problems),
    )
    if problems:
        raise PackError(f"pack {path}: " + "; ".join(problems))
    return pack


def load_packs(path: str | Path) -> dict[str, ContentPack]:
    """Load a pack file or every ``*.yaml`` pack in a directory."""
    path = Path(path)
    files = sorted(path.glob("*.yaml")) if path.is_dir() else [path]
    if not files:
        raise PackError(f"no pack files found under {path}")
    packs: dict[str, ContentPack] = {}
    for file in files:
        pack = load_pack(file)
        if pack.language in packs:
            raise PackError(f"duplicate pack for language {pack.language!r}")
        packs[pack.language] = pack
    return packs


def _check_rule(decl: dict, pack: ContentPack, callbacks: set[str], where: str, problems: list[str]) -> None:
    kind = decl.get("handler")
    if kind not in HANDLER_KINDS:
        problems.append(f"{where}: unknown handler kind {kind!r}")
        return
    if kind == "intent":
        intent = decl.get("intent")
        if intent not in pack.intent_names():
            problems.append(f"{where}: references undeclared intent {intent!r}")
    if kind == "emoji" and decl.get("polarity") not in ("positive", "neutral", "negative"):
        problems.append(f"{where}: emoji polarity must be positive, neutral or negative")
    if kind == "regex":
        try:
            re.compile(decl.get("pattern", ""))
        except re.error as exc:
            problems.append(f"{where}: bad regex: {exc}")
    callback = decl.get("callback")
    if callback not in callbacks:
        problems.append(f"{where}: unresolved callback {callback!r}")
    for emitted in decl.get("emits", []):
        name = emitted.get("name")
        if name != "DONE" and name not in pack.states:
            problems.append(f"{where}: emits undeclared state {name!r}")
        lifetime = emitted.get("lifetime")
        if lifetime is not None and lifetime < 1:
            problems.append(f"{where}: emitted lifetime must be >= 1")


def _check_templates(pack: ContentPack, problems: list[str]) -> None:
    for key, entry in pack.templates.items():
        for formality in ("formal", "informal"):
            variants = entry.variants.get(formality)
            if not variants:
                problems.append(f"template {key!r}: missing {formality} variant")
                continue
            for text in variants + tuple(entry.negative_mood.get(formality, ())):
                for used in _TEMPLATE_PLACEHOLDER_RE.findall(text):
                    if used != "first_name" and used not in entry.params:
                        problems.append(
                            f"template {key!r}: placeholder {{{used}}} not a documented parameter"
                        )


def validate_pack(
    pack: ContentPack,
    callbacks: set[str],
    required_states: tuple[str, ...] = (),
) -> list[str]:
    """Semantic checks over a loaded pack; returns problems, empty if clean."""
    problems: list[str] = []

    if not 0.0 <= pack.fallback_threshold <= 1.0:
        problems.append(f"fallback_threshold {pack.fallback_threshold} outside [0, 1]")
    if not pack.intents:
        problems.append("no intents declared")

    names = [i.name for i in pack.intents]
    if len(set(names)) != len(names):
        problems.append("duplicate intent names")
    declared = set(names)
    for family_name, family in (
        ("affirmation", pack.affirmation_intents),
        ("negation", pack.negation_intents),
    ):
        if not family:
            problems.append(f"{family_name} intent family is empty")
        for intent in family:
            if intent not in declared:
                problems.append(f"{family_name} family references undeclared intent {intent!r}")

    for intent in pack.intents:
        for param in intent.parameters:
            if param.entity_type not in ENTITY_TYPES:
                problems.append(
                    f"intent {intent.name!r}: unknown entity type {param.entity_type!r}"
                )

    for state in required_states:
        if state not in pack.states:
            problems.append(f"required state {state!r} not declared")
    for state_name in pack.rules.get("states", {}):
        if state_name not in pack.states:
            problems.append(f"rules declared for unknown state {state_name!r}")

    for i, decl in enumerate(pack.rules.get("stateless", [])):
        _check_rule(decl, pack, callbacks, f"stateless rule #{i}", problems)
    for state_name, decls in pack.rules.get("states", {}).items():
        for i, decl in enumerate(decls):
            _check_rule(decl, pack, callbacks, f"state {state_name} rule #{i}", problems)
    fallback = pack.rules.get("fallback", [])
    for i, decl in enumerate(fallback):
        _check_rule(decl, pack, callbacks, f"fallback rule #{i}", problems)
    if not fallback or not fallback[-1].get("repair"):
        problems.append("fallback tier must end with the repair rule")

    slots = [q.slot for q in pack.questions]
    if len(set(slots)) != len(slots):
        problems.append("duplicate question slots")
    if not pack.questions:
        problems.append("no questions declared")
    for q in pack.questions:
        if q.entity_type not in ENTITY_TYPES:
            problems.append(f"question {q.id!r}: unknown entity type {q.entity_type!r}")
        for key in (q.prompt_key, q.help_key, q.example_key):
            if key not in pack.templates:
                problems.append(f"question {q.id!r}: missing template key {key!r}")
        if q.entity_type == "phone_model" and not q.clarification_choices:
            problems.append(f"question {q.id!r}: phone model question needs clarification choices")
        choice_ids = [c.choice_id for c in q.clarification_choices]
        if len(set(choice_ids)) != len(choice_ids):
            problems.append(f"question {q.id!r}: duplicate choice ids")
        for c in q.clarification_choices:
            if q.entity_type == "phone_model" and c.canonical_value not in pack.entities.phone_catalog:
                problems.append(
                    f"question {q.id!r}: choice {c.choice_id!r} not in the phone catalog"
                )

    _check_templates(pack, problems)

    overlap = pack.entities.emoji_positive & pack.entities.emoji_negative
    if overlap:
        problems.append(f"emoji lexicons overlap: {sorted(overlap)}")
    for category in pack.entities.damage_synonyms:
        if category not in DAMAGE_TYPES:
            problems.append(f"unknown damage category {category!r}")
    if not pack.entities.phone_catalog:
        problems.append("phone model catalog is empty")

    return problems


def bundled_pack_dir() -> Path:
    return Path(__file__).parent / "packs"


def bundled_script_dir() -> Path:
    return Path(__file__).parent / "scripts"
