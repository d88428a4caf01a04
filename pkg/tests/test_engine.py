from __future__ import annotations

import copy
from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from claimflow.content import ContentPack, EntityCatalog
from claimflow.engine import (
    AffirmationHandler,
    CallbackEnv,
    DialogState,
    Engine,
    EngineError,
    EmojiSentimentHandler,
    IntentHandler,
    MediaHandler,
    NegationHandler,
    RegexHandler,
    Router,
    Rule,
    RuleOutcome,
    build_router,
    classify_emoji_sentiment,
    state_order_key,
    tick_lifetimes,
)
from claimflow.nlu import EntityValue, FALLBACK_INTENT, MessageUnderstanding
from claimflow.store import UserContext

POS = frozenset({"👍"})
NEG = frozenset({"😡"})


def understanding(intent="greet", parameters=None, raw_text="hi", media_kind=None, emojis=()):
    return MessageUnderstanding(
        intent=intent,
        confidence=1.0,
        parameters=parameters or {},
        raw_text=raw_text,
        language="en",
        media_kind=media_kind,
        emojis=tuple(emojis),
    )


def mini_pack() -> ContentPack:
    return ContentPack(
        language="en",
        fallback_threshold=0.5,
        persona_name="",
        stopwords=frozenset(),
        intents=(),
        affirmation_intents=("affirm", "ok"),
        negation_intents=("deny",),
        entities=EntityCatalog(
            damage_synonyms={},
            damage_labels={},
            phone_catalog=("iPhone 7",),
            slot_synonyms={},
            emoji_positive=POS,
            emoji_negative=NEG,
        ),
        states={"A": None, "B": None, "Q": None},
        rules={},
        questions=(),
        templates={},
    )


def ctx_with(states, turn=0) -> UserContext:
    ctx = UserContext(user_id="u")
    ctx.active_states = list(states)
    ctx.turn_counter = turn
    return ctx


class TestHandlers:
    def test_intent_handler_requires_parameters(self):
        present = understanding(
            intent="phone_broken",
            parameters={"damage_type": EntityValue(kind="damage_type", value="display_damage")},
        )
        assert IntentHandler("phone_broken", ("damage_type",)).matches(present)
        assert not IntentHandler("phone_broken", ("damage_type", "phone_type")).matches(present)
        assert not IntentHandler("other").matches(present)

    def test_affirmation_and_negation_families(self):
        family = AffirmationHandler(frozenset({"affirm", "ok"}))
        assert family.matches(understanding(intent="ok"))
        assert not family.matches(understanding(intent="deny"))
        negation = NegationHandler(frozenset({"deny"}))
        assert negation.matches(understanding(intent="deny"))

    def test_media_handler(self):
        assert MediaHandler().matches(understanding(media_kind="image"))
        assert not MediaHandler().matches(understanding())

    def test_emoji_sentiment_handler(self):
        handler = EmojiSentimentHandler(polarity="negative", positive=POS, negative=NEG)
        assert handler.matches(understanding(emojis=["😡"]))
        assert not handler.matches(understanding(emojis=["👍"]))

    def test_regex_handler(self):
        assert RegexHandler(pattern=r"\bdu\b").matches(understanding(raw_text="kannst du helfen"))
        assert not RegexHandler(pattern=r"\bdu\b").matches(understanding(raw_text="durst"))


class TestEmojiSentiment:
    def test_positive(self):
        assert classify_emoji_sentiment(["👍"], POS, NEG) == "positive"

    def test_empty_is_neutral(self):
        assert classify_emoji_sentiment([], POS, NEG) == "neutral"

    def test_tie_is_neutral(self):
        assert classify_emoji_sentiment(["👍", "😡"], POS, NEG) == "neutral"

    def test_majority_wins(self):
        assert classify_emoji_sentiment(["😡", "😡", "👍"], POS, NEG) == "negative"


class TestTickLifetimes:
    def test_decrements_finite_keeps_unbounded(self):
        ctx = ctx_with([DialogState("A", lifetime=2), DialogState("B")])
        out = tick_lifetimes(ctx, fired_was_fallback_intent=False)
        assert {(s.name, s.lifetime) for s in out.active_states} == {("A", 1), ("B", None)}

    def test_eviction_at_zero(self):
        ctx = ctx_with([DialogState("A", lifetime=1)])
        out = tick_lifetimes(ctx, fired_was_fallback_intent=False)
        assert out.active_states == []

    def test_fallback_intent_freezes_lifetimes(self):
        ctx = ctx_with([DialogState("A", lifetime=1)])
        out = tick_lifetimes(ctx, fired_was_fallback_intent=True)
        assert [(s.name, s.lifetime) for s in out.active_states] == [("A", 1)]

    def test_input_context_untouched(self):
        ctx = ctx_with([DialogState("A", lifetime=2)])
        tick_lifetimes(ctx, fired_was_fallback_intent=False)
        assert ctx.active_states[0].lifetime == 2

    @settings(max_examples=200, deadline=None)
    @given(
        st.lists(
            st.tuples(
                st.sampled_from(["s1", "s2", "s3", "s4"]),
                st.one_of(st.none(), st.integers(min_value=1, max_value=5)),
            ),
            unique_by=lambda t: t[0],
            max_size=4,
        ),
        st.lists(st.booleans(), max_size=12),
    )
    def test_matches_reference_simulation(self, initial, fallback_sequence):
        ctx = ctx_with([DialogState(name, lifetime=life) for name, life in initial])
        reference = {name: life for name, life in initial}
        for is_fallback in fallback_sequence:
            ctx = tick_lifetimes(ctx, is_fallback)
            if not is_fallback:
                reference = {
                    name: (life - 1 if life is not None else None)
                    for name, life in reference.items()
                    if life is None or life - 1 >= 1
                }
            assert {(s.name, s.lifetime) for s in ctx.active_states} == set(reference.items())


def probe_callbacks(log):
    def probe(env: CallbackEnv) -> RuleOutcome:
        log.append(env.rule)
        return RuleOutcome()

    return {"probe": probe}


def intent_rule(intent, order, is_repair=False, emits=()):
    return Rule(
        handler=IntentHandler(intent),
        callback="probe",
        emits=tuple(emits),
        declaration_order=order,
        is_repair=is_repair,
    )


def repair_rule(order):
    return Rule(
        handler=RegexHandler(pattern="(?s)"),
        callback="probe",
        declaration_order=order,
        is_repair=True,
    )


def make_engine(router, log):
    return Engine(router=router, callbacks=probe_callbacks(log), pack=mini_pack())


class TestPlan:
    def build(self, stateless=(), state_rules=None, fallback=()):
        log = []
        router = Router(
            stateless_rules=tuple(stateless),
            state_rules={k: tuple(v) for k, v in (state_rules or {"A": [], "B": [], "Q": []}).items()},
            fallback_rules=tuple(fallback) + (repair_rule(99),),
        )
        return make_engine(router, log), log

    def test_exactly_one_rule_fires(self):
        engine, log = self.build(
            stateless=[intent_rule("x", 0)],
            state_rules={"A": [intent_rule("greet", 1)], "B": [intent_rule("greet", 2)], "Q": []},
            fallback=[intent_rule("greet", 3)],
        )
        ctx = ctx_with([DialogState("A"), DialogState("B")])
        engine.plan(understanding("greet"), ctx)
        assert len(log) == 1

    def test_stateless_tier_wins_even_with_active_state_match(self):
        stateless = intent_rule("greet", 0)
        state_match = intent_rule("greet", 1)
        engine, log = self.build(stateless=[stateless], state_rules={"A": [state_match], "B": [], "Q": []})
        engine.plan(understanding("greet"), ctx_with([DialogState("A")]))
        assert log == [stateless]

    def test_state_tier_wins_over_fallback(self):
        state_match = intent_rule("greet", 1)
        fallback_match = intent_rule("greet", 2)
        engine, log = self.build(state_rules={"A": [state_match], "B": [], "Q": []}, fallback=[fallback_match])
        engine.plan(understanding("greet"), ctx_with([DialogState("A")]))
        assert log == [state_match]

    def test_higher_priority_state_consulted_first(self):
        low = intent_rule("greet", 1)
        high = intent_rule("greet", 2)
        engine, log = self.build(state_rules={"A": [low], "B": [high], "Q": []})
        ctx = ctx_with(
            [DialogState("A", priority=-10, created_turn=5), DialogState("B", priority=0, created_turn=1)]
        )
        engine.plan(understanding("greet"), ctx)
        assert log == [high]

    def test_newer_state_wins_among_equal_priority(self):
        older = intent_rule("greet", 1)
        newer = intent_rule("greet", 2)
        engine, log = self.build(state_rules={"A": [older], "B": [newer], "Q": []})
        ctx = ctx_with([DialogState("A", created_turn=1), DialogState("B", created_turn=4)])
        engine.plan(understanding("greet"), ctx)
        assert log == [newer]

    def test_repair_always_fires_when_nothing_matches(self):
        engine, log = self.build()
        result = engine.plan(understanding("anything"), ctx_with([]))
        assert result.fired.is_repair

    def test_emitted_state_pushed_and_not_ticked_same_turn(self):
        rule = intent_rule("greet", 0, emits=[DialogState("B", lifetime=2)])
        engine, log = self.build(state_rules={"A": [rule], "B": [], "Q": []})
        ctx = ctx_with([DialogState("A", lifetime=2)], turn=7)
        result = engine.plan(understanding("greet"), ctx)
        states = {s.name: s for s in result.context.active_states}
        assert states["A"].lifetime == 1  # ticked
        assert states["B"].lifetime == 2  # pushed after the tick
        assert states["B"].created_turn == 7

    def test_reemission_replaces_and_resets_lifetime(self):
        rule = intent_rule("greet", 0, emits=[DialogState("A", lifetime=3)])
        engine, log = self.build(state_rules={"A": [rule], "B": [], "Q": []})
        ctx = ctx_with([DialogState("A", lifetime=1, created_turn=1)], turn=9)
        result = engine.plan(understanding("greet"), ctx)
        assert [(s.name, s.lifetime, s.created_turn) for s in result.context.active_states] == [
            ("A", 3, 9)
        ]

    def test_fallback_intent_does_not_tick(self):
        engine, log = self.build()
        ctx = ctx_with([DialogState("A", lifetime=1)])
        result = engine.plan(understanding(FALLBACK_INTENT), ctx)
        assert [(s.name, s.lifetime) for s in result.context.active_states] == [("A", 1)]

    def test_consecutive_fallback_counting(self):
        engine, log = self.build()
        ctx = ctx_with([])
        result = engine.plan(understanding(FALLBACK_INTENT), ctx)
        assert result.context.consecutive_fallbacks == 1
        result = engine.plan(understanding(FALLBACK_INTENT), result.context)
        assert result.context.consecutive_fallbacks == 2

    def test_non_repair_rule_resets_fallback_count(self):
        engine, log = self.build(fallback=[intent_rule("greet", 0)])
        ctx = ctx_with([])
        ctx.consecutive_fallbacks = 2
        result = engine.plan(understanding("greet"), ctx)
        assert result.context.consecutive_fallbacks == 0

    def test_plan_is_pure_and_deterministic(self):
        rule = intent_rule("greet", 0, emits=[DialogState("B", lifetime=2)])
        engine, log = self.build(state_rules={"A": [rule], "B": [], "Q": []})
        ctx = ctx_with([DialogState("A", lifetime=3)], turn=2)
        snapshot = copy.deepcopy(ctx)
        first = engine.plan(understanding("greet"), ctx)
        second = engine.plan(understanding("greet"), ctx)
        assert ctx == snapshot
        assert first.context == second.context
        assert first.replies == second.replies

    def test_emoji_mood_update_happens_before_rules(self):
        engine, log = self.build(fallback=[intent_rule("greet", 0)])
        result = engine.plan(understanding("greet", emojis=["😡"]), ctx_with([]))
        assert result.context.profile.mood == "negative"

    def test_condition_guards_rule(self):
        guarded = replace(
            intent_rule("greet", 0), condition=lambda und, ctx: ctx.turn_counter > 5
        )
        engine, log = self.build(stateless=[guarded], fallback=[intent_rule("greet", 1)])
        result = engine.plan(understanding("greet"), ctx_with([], turn=1))
        assert result.fired is not guarded
        result = engine.plan(understanding("greet"), ctx_with([], turn=6))
        assert result.fired is guarded


class TestRouterInvariants:
    def test_fallback_must_end_with_repair(self):
        with pytest.raises(EngineError):
            Router(stateless_rules=(), state_rules={}, fallback_rules=(intent_rule("x", 0),))

    def test_emitted_states_must_be_declared(self):
        rule = intent_rule("x", 0, emits=[DialogState("GHOST")])
        with pytest.raises(EngineError):
            Router(stateless_rules=(rule,), state_rules={}, fallback_rules=(repair_rule(1),))

    def test_done_is_a_legal_emit_target(self):
        rule = intent_rule("x", 0, emits=[DialogState("DONE")])
        router = Router(stateless_rules=(rule,), state_rules={}, fallback_rules=(repair_rule(1),))
        log = []
        engine = make_engine(router, log)
        result = engine.plan(understanding("x"), ctx_with([]))
        assert result.context.active_states == []  # DONE is terminal, never pushed

    def test_unresolved_callback_fails_fast(self):
        router = Router(stateless_rules=(), state_rules={}, fallback_rules=(repair_rule(0),))
        with pytest.raises(EngineError):
            Engine(router=router, callbacks={}, pack=mini_pack())


# Tier precedence property: plan agrees with a brute-force matcher over
# every rule in every tier.

INTENTS = ("a", "b", "c")
STATE_NAMES = ("A", "B", "Q")


@st.composite
def routers_and_inputs(draw):
    def rules(tier_offset, count):
        out = []
        for i in range(count):
            out.append(intent_rule(draw(st.sampled_from(INTENTS)), tier_offset + i))
        return tuple(out)

    stateless = rules(0, draw(st.integers(0, 2)))
    state_rules = {name: rules(10, draw(st.integers(0, 2))) for name in STATE_NAMES}
    fallback = rules(20, draw(st.integers(0, 2))) + (repair_rule(42),)
    router = Router(stateless_rules=stateless, state_rules=state_rules, fallback_rules=fallback)
    active = draw(
        st.lists(st.sampled_from(STATE_NAMES), unique=True, max_size=3).map(
            lambda names: [
                DialogState(name, priority=draw(st.integers(-1, 1)), created_turn=draw(st.integers(0, 5)))
                for name in names
            ]
        )
    )
    intent = draw(st.sampled_from(INTENTS + ("zzz",)))
    return router, active, intent


def brute_force_selection(router, ctx, und):
    for rule in router.stateless_rules:
        if rule.applies(und, ctx):
            return rule
    for state in sorted(ctx.active_states, key=state_order_key):
        for rule in router.state_rules.get(state.name, ()):
            if rule.applies(und, ctx):
                return rule
    for rule in router.fallback_rules:
        if rule.applies(und, ctx):
            return rule
    raise AssertionError("unreachable: repair matches everything")


@settings(max_examples=300, deadline=None)
@given(routers_and_inputs())
def test_tier_precedence_matches_brute_force(case):
    router, active, intent = case
    log = []
    engine = make_engine(router, log)
    ctx = ctx_with(active)
    und = understanding(intent)
    expected = brute_force_selection(router, copy.deepcopy(ctx), und)
    result = engine.plan(und, ctx)
    assert result.fired is expected
    assert log == [expected]  # exactly one callback ran
    if any(r.applies(und, ctx) for r in router.stateless_rules):
        assert expected in router.stateless_rules
    state_rules = [r for rules in router.state_rules.values() for r in rules]
    if expected in state_rules or expected in router.stateless_rules:
        assert expected not in router.fallback_rules


def test_build_router_from_pack_declarations():
    pack = replace(
        mini_pack(),
        states={"Q": None},
        rules={
            "stateless": [],
            "states": {
                "Q": [
                    {"handler": "affirmation", "callback": "probe"},
                    {
                        "handler": "intent",
                        "intent": "x",
                        "callback": "probe",
                        "emits": [{"name": "Q", "lifetime": 2}],
                    },
                ]
            },
            "fallback": [
                {"handler": "regex", "pattern": "(?s)", "callback": "probe", "repair": True}
            ],
        },
    )
    from claimflow.content import StateDecl

    pack = replace(pack, states={"Q": StateDecl(lifetime=None, priority=-10)})
    router = build_router(pack, conditions={})
    assert isinstance(router.state_rules["Q"][0].handler, AffirmationHandler)
    assert router.state_rules["Q"][0].handler.family == frozenset({"affirm", "ok"})
    assert router.state_rules["Q"][1].emits[0].lifetime == 2
    assert router.fallback_rules[-1].is_repair

    with pytest.raises(EngineError):
        build_router(
            replace(
                pack,
                rules={
                    "stateless": [
                        {"handler": "regex", "pattern": "x", "callback": "probe", "condition": "ghost"}
                    ],
                    "fallback": [
                        {"handler": "regex", "pattern": "(?s)", "callback": "probe", "repair": True}
                    ],
                },
            ),
            conditions={},
        )
