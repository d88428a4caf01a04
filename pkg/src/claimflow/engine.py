"""Layered finite-state dialog control.

Each user message is routed through three rule tiers: stateless rules
first, then the rules of every active dialog state (priority order), then
fallbacks, which end in a repair rule that always matches. Exactly one
rule fires per message. States are layered in a priority queue and may
carry a lifetime counted in dialog moves; lifetimes tick down on every
message except utter non-understanding.
"""

from __future__ import annotations

import copy
import re
from dataclasses import dataclass, field, replace
from datetime import datetime
from typing import TYPE_CHECKING, Callable, Protocol

from .messaging import ChatAction
from .nlu import FALLBACK_INTENT, MessageUnderstanding
from .responder import Say

if TYPE_CHECKING:
    from .content import ContentPack
    from .store import UserContext

TERMINAL_STATE = "DONE"


class EngineError(Exception):
    pass


@dataclass(frozen=True)
class DialogState:
    """A named conversational state, layered with others.

    ``lifetime`` is the number of dialog moves the state stays active;
    None means unbounded. Higher ``priority`` states are consulted first,
    most recently created wins among equals.
    """

    name: str
    lifetime: int | None = None
    priority: int = 0
    created_turn: int = 0

    def __post_init__(self) -> None:
        if self.lifetime is not None and self.lifetime < 1:
            raise ValueError(f"state {self.name!r} lifetime must be >= 1")


def state_order_key(state: DialogState) -> tuple:
    return (-state.priority, -state.created_turn, state.name)


class Handler(Protocol):
    def matches(self, understanding: MessageUnderstanding) -> bool: ...


@dataclass(frozen=True)
class IntentHandler:
    intent: str
    required_parameters: tuple[str, ...] = ()

    def matches(self, understanding: MessageUnderstanding) -> bool:
        if understanding.intent != self.intent:
            return False
        return all(p in understanding.parameters for p in self.required_parameters)


@dataclass(frozen=True)
class AffirmationHandler:
    """Consolidates every intent that expresses a confirmation."""

    family: frozenset[str]

    def matches(self, understanding: MessageUnderstanding) -> bool:
        return understanding.intent in self.family


@dataclass(frozen=True)
class NegationHandler:
    family: frozenset[str]

    def matches(self, understanding: MessageUnderstanding) -> bool:
        return understanding.intent in self.family


@dataclass(frozen=True)
class MediaHandler:
    def matches(self, understanding: MessageUnderstanding) -> bool:
        return understanding.media_kind is not None


@dataclass(frozen=True)
class EmojiSentimentHandler:
    polarity: str
    positive: frozenset[str]
    negative: frozenset[str]

    def matches(self, understanding: MessageUnderstanding) -> bool:
        sentiment = classify_emoji_sentiment(understanding.emojis, self.positive, self.negative)
        return sentiment == self.polarity


@dataclass(frozen=True)
class RegexHandler:
    pattern: str
    target: str = ""

    def matches(self, understanding: MessageUnderstanding) -> bool:
        return re.search(self.pattern, understanding.raw_text) is not None


RuleCondition = Callable[[MessageUnderstanding, "UserContext"], bool]


@dataclass(frozen=True)
class Rule:
    """A handler bound to a callback, optionally emitting new states.

    ``condition`` is an extra guard evaluated against the user context;
    it keeps context-dependent rules (like the formality switch, which
    should only fire on an actual change) from consuming messages they
    would answer with a no-op.
    """

    handler: Handler
    callback: str
    emits: tuple[DialogState, ...] = ()
    args: dict = field(default_factory=dict)
    declaration_order: int = 0
    condition: RuleCondition | None = None
    is_repair: bool = False

    def applies(self, understanding: MessageUnderstanding, context: "UserContext") -> bool:
        if not self.handler.matches(understanding):
            return False
        if self.condition is not None and not self.condition(understanding, context):
            return False
        return True


@dataclass(frozen=True)
class Router:
    stateless_rules: tuple[Rule, ...]
    state_rules: dict[str, tuple[Rule, ...]]
    fallback_rules: tuple[Rule, ...]

    def __post_init__(self) -> None:
        if not self.fallback_rules or not self.fallback_rules[-1].is_repair:
            raise EngineError("fallback tier must end with the repair rule")
        known = set(self.state_rules) | {TERMINAL_STATE}
        for rule in self.iter_rules():
            for state in rule.emits:
                if state.name not in known:
                    raise EngineError(f"rule emits undeclared state {state.name!r}")

    def iter_rules(self):
        yield from self.stateless_rules
        for rules in self.state_rules.values():
            yield from rules
        yield from self.fallback_rules


def classify_emoji_sentiment(
    emojis: tuple[str, ...] | list[str],
    positive: frozenset[str],
    negative: frozenset[str],
) -> str:
    """Majority vote over the emoji lexicons; empty or tied is neutral."""
    pos = sum(1 for e in emojis if e in positive)
    neg = sum(1 for e in emojis if e in negative)
    if pos > neg:
        return "positive"
    if neg > pos:
        return "negative"
    return "neutral"


def tick_lifetimes(context: "UserContext", fired_was_fallback_intent: bool) -> "UserContext":
    """Decrement every finite state lifetime by one dialog move.

    Messages the bot utterly failed to understand do not count as moves,
    so nothing ticks then. States reaching zero are evicted.
    """
    updated = copy.deepcopy(context)
    _tick_inplace(updated, fired_was_fallback_intent)
    return updated


def _tick_inplace(context: "UserContext", fired_was_fallback_intent: bool) -> None:
    if fired_was_fallback_intent:
        return
    survivors = []
    for state in context.active_states:
        if state.lifetime is None:
            survivors.append(state)
            continue
        remaining = state.lifetime - 1
        if remaining >= 1:
            survivors.append(replace(state, lifetime=remaining))
    context.active_states = survivors


@dataclass
class CallbackEnv:
    """Everything a rule callback may touch.

    ``context`` is the working copy for this message; callbacks mutate
    slots, profile and counters directly but request state changes
    through the returned :class:`RuleOutcome` so lifetime bookkeeping
    stays in one place.
    """

    context: "UserContext"
    understanding: MessageUnderstanding
    pack: "ContentPack"
    rule: Rule
    store: object | None = None
    now: datetime | None = None


@dataclass
class RuleOutcome:
    replies: list[Say | ChatAction] = field(default_factory=list)
    push: list[DialogState] = field(default_factory=list)
    remove: list[str] = field(default_factory=list)


Callback = Callable[[CallbackEnv], RuleOutcome]


@dataclass
class PlanResult:
    replies: list[Say | ChatAction]
    context: "UserContext"
    fired: Rule


class Engine:
    """Selects and fires exactly one rule per message."""

    def __init__(
        self,
        router: Router,
        callbacks: dict[str, Callback],
        pack: "ContentPack",
        store: object | None = None,
        now: Callable[[], datetime] | None = None,
    ):
        missing = [r.callback for r in router.iter_rules() if r.callback not in callbacks]
        if missing:
            raise EngineError(f"unresolved rule callbacks: {sorted(set(missing))}")
        self.router = router
        self.callbacks = callbacks
        self.pack = pack
        self.store = store
        self.now = now

    def select_rule(self, understanding: MessageUnderstanding, context: "UserContext") -> Rule:
        for rule in self.router.stateless_rules:
            if rule.applies(understanding, context):
                return rule
        for state in sorted(context.active_states, key=state_order_key):
            for rule in self.router.state_rules.get(state.name, ()):
                if rule.applies(understanding, context):
                    return rule
        for rule in self.router.fallback_rules:
            if rule.applies(understanding, context):
                return rule
        raise EngineError("no rule fired; the terminal repair rule must always match")

    def plan(self, understanding: MessageUnderstanding, context: "UserContext") -> PlanResult:
        """Route one understanding through the rule tiers.

        Pure with respect to the given context: work happens on a deep
        copy. After the fired callback runs, lifetimes tick (unless the
        intent was utter non-understanding), then removed and emitted
        states are applied; re-emitting an active state replaces it.
        """
        ctx = copy.deepcopy(context)
        if understanding.emojis:
            ctx.profile.mood = classify_emoji_sentiment(
                understanding.emojis,
                self.pack.entities.emoji_positive,
                self.pack.entities.emoji_negative,
            )

        rule = self.select_rule(understanding, ctx)
        if rule.is_repair:
            ctx.consecutive_fallbacks += 1
        else:
            ctx.consecutive_fallbacks = 0

        env = CallbackEnv(
            context=ctx,
            understanding=understanding,
            pack=self.pack,
            rule=rule,
            store=self.store,
            now=self.now() if self.now else None,
        )
        outcome = self.callbacks[rule.callback](env)

        _tick_inplace(ctx, understanding.intent == FALLBACK_INTENT)
        for name in outcome.remove:
            ctx.drop_state(name)
        for state in (*rule.emits, *outcome.push):
            if state.name == TERMINAL_STATE:
                continue
            ctx.push_state(replace(state, created_turn=ctx.turn_counter))
        return PlanResult(replies=outcome.replies, context=ctx, fired=rule)


def _build_handler(decl: dict, pack: "ContentPack") -> Handler:
    kind = decl.get("handler")
    if kind == "intent":
        return IntentHandler(
            intent=decl["intent"],
            required_parameters=tuple(decl.get("requires", ())),
        )
    if kind == "affirmation":
        return AffirmationHandler(family=frozenset(pack.affirmation_intents))
    if kind == "negation":
        return NegationHandler(family=frozenset(pack.negation_intents))
    if kind == "media":
        return MediaHandler()
    if kind == "emoji":
        return EmojiSentimentHandler(
            polarity=decl["polarity"],
            positive=pack.entities.emoji_positive,
            negative=pack.entities.emoji_negative,
        )
    if kind == "regex":
        return RegexHandler(pattern=decl["pattern"], target=decl.get("target", ""))
    raise EngineError(f"unknown handler kind {kind!r}")


def _build_rule(
    decl: dict,
    pack: "ContentPack",
    order: int,
    conditions: dict[str, RuleCondition],
) -> Rule:
    emits = []
    for emitted in decl.get("emits", ()):
        state_decl = pack.states.get(emitted["name"])
        emits.append(
            DialogState(
                name=emitted["name"],
                lifetime=emitted.get("lifetime", state_decl.lifetime if state_decl else None),
                priority=emitted.get("priority", state_decl.priority if state_decl else 0),
            )
        )
    condition = None
    condition_name = decl.get("condition")
    if condition_name:
        if condition_name not in conditions:
            raise EngineError(f"unknown rule condition {condition_name!r}")
        condition = conditions[condition_name]
    return Rule(
        handler=_build_handler(decl, pack),
        callback=decl["callback"],
        emits=tuple(emits),
        args={
            k: v
            for k, v in decl.items()
            if k not in ("handler", "callback", "emits", "condition")
        },
        declaration_order=order,
        condition=condition,
        is_repair=bool(decl.get("repair", False)),
    )


def build_router(pack: "ContentPack", conditions: dict[str, RuleCondition]) -> Router:
    """Wire the content pack's rule declarations into a Router."""
    order = 0

    def build_list(decls) -> tuple[Rule, ...]:
        nonlocal order
        rules = []
        for decl in decls:
            rules.append(_build_rule(decl, pack, order, conditions))
            order += 1
        return tuple(rules)

    stateless = build_list(pack.rules.get("stateless", ()))
    state_rules: dict[str, tuple[Rule, ...]] = {}
    for state_name in pack.states:
        state_rules[state_name] = build_list(pack.rules.get("states", {}).get(state_name, ()))
    fallback = build_list(pack.rules.get("fallback", ()))
    return Router(stateless_rules=stateless, state_rules=state_rules, fallback_rules=fallback)
