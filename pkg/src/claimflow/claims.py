"""Damage-claim questionnaire flow and dialog rule callbacks.

The domain behavior lives here: starting the claim frame, interpreting
answers, the confirm/repeat loop, skip and help, model clarification by
multiple choice, cancellation, small talk, and finalizing the claim into
the store. Callbacks are pure context transformations invoked by the
engine; which callback runs for which message is wired in the content
pack's rules section.
"""

from __future__ import annotations

import logging

from .content import ChoiceSpec, ContentPack, QuestionSpec  # noqa: F401  (re-exported)
from .engine import CallbackEnv, DialogState, RuleOutcome
from .messaging import Choice, send_choices, store_claim
from .nlu import EntityValue, extract_damage_type, extract_datetime, extract_imei_candidate, extract_phone_number, match_phone_models, validate_imei
from .responder import Say, detect_formality
from .store import ClaimRecord, PendingChoice, PendingConfirmation, StorageUnavailable

logger = logging.getLogger(__name__)

QUESTIONNAIRE = "QUESTIONNAIRE"
USER_CONFIRMING_ANSWER = "USER_CONFIRMING_ANSWER"
CLARIFY_PHONE_MODEL = "CLARIFY_PHONE_MODEL"
CONFIRM_CANCEL = "CONFIRM_CANCEL"

REQUIRED_STATES = (QUESTIONNAIRE, USER_CONFIRMING_ANSWER, CLARIFY_PHONE_MODEL, CONFIRM_CANCEL)
CLAIM_STATES = REQUIRED_STATES

# Answer types where the user input is already an unambiguous yes/no;
# asking "is that correct?" on top would be absurd.
SELF_CONFIRMING_TYPES = frozenset({"confirmation"})

CONFIRM_LIFETIME = 3
CLARIFY_LIFETIME = 3
PROACTIVE_HELP_AFTER = 3

_SMALLTALK_KEYS = {
    "greet": "greet",
    "how_are_you": "how_are_you",
    "thanks": "thanks",
    "goodbye": "goodbye",
}


def current_question(ctx, pack: ContentPack) -> QuestionSpec | None:
    """First question whose slot is neither filled nor skipped.

    Pre-filled frame parameters count as filled, so they are never
    re-asked.
    """
    for q in pack.questions:
        if q.slot not in ctx.slots and q.slot not in ctx.skipped_slots:
            return q
    return None


def value_label(pack: ContentPack, value: EntityValue) -> str:
    if value.kind == "damage_type":
        return pack.entities.damage_labels.get(value.value, value.value)
    return value.render()


def _slot_params(ctx, pack: ContentPack) -> dict[str, str]:
    return {slot: value_label(pack, v) for slot, v in ctx.slots.items()}


def ask(q: QuestionSpec, ctx, pack: ContentPack) -> list[Say]:
    return [Say(q.prompt_key, _slot_params(ctx, pack))]


def _confirm_state() -> DialogState:
    return DialogState(name=USER_CONFIRMING_ANSWER, lifetime=CONFIRM_LIFETIME)


def _clarify_state() -> DialogState:
    return DialogState(name=CLARIFY_PHONE_MODEL, lifetime=CLARIFY_LIFETIME)


def _prefill_from_parameters(ctx, pack: ContentPack, parameters: dict[str, EntityValue]) -> None:
    # Parameters map onto questionnaire slots via their entity kind, so an
    # intent parameter named differently than the slot still lands.
    for value in parameters.values():
        for q in pack.questions:
            if q.entity_type == value.kind and q.slot not in ctx.slots:
                ctx.slots[q.slot] = value
                break


def _clear_frame(ctx) -> None:
    ctx.slots.clear()
    ctx.skipped_slots.clear()
    ctx.pending_confirmation = None
    ctx.pending_choices = []
    ctx.question_failures.clear()


def _extract_answer(env: CallbackEnv, q: QuestionSpec) -> EntityValue | None | list[str]:
    """Interpret the utterance as an answer to the current question.

    Returns the extracted value, None when nothing usable was found, or a
    list of catalog candidates when a phone model mention is ambiguous.
    """
    und = env.understanding
    pack = env.pack
    text = und.raw_text
    if q.entity_type == "damage_type":
        return extract_damage_type(text, pack.entities.damage_synonyms)
    if q.entity_type == "phone_model":
        hits = match_phone_models(text, pack.entities.phone_catalog)
        if not hits:
            return None
        if len(hits) == 1:
            return EntityValue(kind="phone_model", value=hits[0])
        return hits
    if q.entity_type == "imei":
        candidate = extract_imei_candidate(text)
        if candidate is None:
            return None
        check = validate_imei(candidate)
        if not check.valid:
            return None
        return EntityValue(kind="imei", value=candidate)
    if q.entity_type == "datetime":
        if env.now is None:
            raise RuntimeError("datetime extraction needs a reference time")
        return extract_datetime(text, und.language, env.now)
    if q.entity_type == "phone_number":
        return extract_phone_number(text)
    if q.entity_type == "confirmation":
        if und.intent in pack.affirmation_intents:
            return EntityValue(kind="text", value="yes")
        if und.intent in pack.negation_intents:
            return EntityValue(kind="text", value="no")
        return None
    if q.entity_type == "text":
        stripped = text.strip()
        return EntityValue(kind="text", value=stripped) if stripped else None
    raise RuntimeError(f"question {q.id!r} has unhandled entity type {q.entity_type!r}")


def _advance(env: CallbackEnv, outcome: RuleOutcome) -> None:
    """Ask the next unfilled question, or finalize when none is left."""
    ctx, pack = env.context, env.pack
    q = current_question(ctx, pack)
    if q is None:
        _finalize(env, outcome)
        return
    outcome.replies.extend(ask(q, ctx, pack))


def _finalize(env: CallbackEnv, outcome: RuleOutcome) -> None:
    ctx, pack = env.context, env.pack
    required = [q.slot for q in pack.questions if not q.optional]
    missing = [s for s in required if s not in ctx.slots]
    if missing:
        raise RuntimeError(f"finalize with unfilled required slots: {missing}")
    record = ClaimRecord(
        user_id=ctx.user_id,
        slots=dict(ctx.slots),
        completed_at=env.now.isoformat() if env.now else "",
        transcript_ref=f"{ctx.user_id}:{ctx.turn_counter}",
    )
    record.check_invariants(required)
    try:
        claim_id = env.store.persist_claim(record)
    except StorageUnavailable:
        logger.exception("claim persistence failed for %s", ctx.user_id)
        outcome.replies.append(Say("claim_store_failed"))
        return  # slots and states stay; the next message retries
    outcome.replies.append(Say("claim_thanks", {"claim_id": claim_id}))
    outcome.replies.append(store_claim(claim_id))
    _clear_frame(ctx)
    outcome.remove.extend(CLAIM_STATES)


def _register_failure(env: CallbackEnv, outcome: RuleOutcome, q: QuestionSpec, reply_key: str) -> None:
    ctx = env.context
    count = ctx.question_failures.get(q.id, 0) + 1
    if count >= PROACTIVE_HELP_AFTER:
        ctx.question_failures[q.id] = 0
        outcome.replies.append(Say(q.help_key))
        outcome.replies.extend(ask(q, ctx, env.pack))
    else:
        ctx.question_failures[q.id] = count
        outcome.replies.append(Say(reply_key))
        outcome.replies.extend(ask(q, ctx, env.pack))


def _offer_choices(env: CallbackEnv, outcome: RuleOutcome, q: QuestionSpec, candidates: list[str]) -> None:
    ctx = env.context
    specs = [c for c in q.clarification_choices if c.canonical_value in candidates]
    if len(specs) < 2:  # catalog/choice list out of sync; fall back to text
        _register_failure(env, outcome, q, "answer_not_understood")
        return
    ctx.pending_choices = [
        PendingChoice(choice_id=c.choice_id, label=c.label, canonical_value=c.canonical_value)
        for c in specs
    ]
    outcome.replies.append(Say("choose_model"))
    outcome.replies.append(
        send_choices(None, [Choice(c.choice_id, c.label) for c in specs])
    )
    outcome.push.append(_clarify_state())


def _commit(env: CallbackEnv, outcome: RuleOutcome, slot: str, value: EntityValue) -> None:
    ctx = env.context
    ctx.slots[slot] = value
    ctx.pending_confirmation = None
    ctx.pending_choices = []
    q = env.pack.question_by_slot(slot)
    if q is not None:
        ctx.question_failures.pop(q.id, None)
    outcome.remove.extend([USER_CONFIRMING_ANSWER, CLARIFY_PHONE_MODEL])
    _advance(env, outcome)


# --- callbacks ---------------------------------------------------------


def start_claim(env: CallbackEnv) -> RuleOutcome:
    """Open the claim frame, pre-filling whatever the trigger already said."""
    ctx, pack = env.context, env.pack
    outcome = RuleOutcome()
    if ctx.has_state(QUESTIONNAIRE):
        outcome.replies.append(Say("claim_already_active"))
        q = current_question(ctx, pack)
        if q:
            outcome.replies.extend(ask(q, ctx, pack))
        return outcome
    _clear_frame(ctx)
    _prefill_from_parameters(ctx, pack, env.understanding.parameters)
    outcome.replies.append(Say("claim_intro"))
    _advance(env, outcome)
    return outcome


def handle_answer(env: CallbackEnv) -> RuleOutcome:
    """Interpret the message as an answer to the current question.

    Understood answers are echoed back for explicit confirmation (except
    self-confirming yes/no questions); ambiguous phone models produce a
    multiple-choice prompt; anything else repeats the question, with the
    help text offered proactively after repeated failures.
    """
    ctx, pack, und = env.context, env.pack, env.understanding
    outcome = RuleOutcome()
    q = current_question(ctx, pack)
    if q is None:
        _finalize(env, outcome)  # everything answered; persistence retry path
        return outcome

    smalltalk_key = _SMALLTALK_KEYS.get(und.intent)
    if smalltalk_key:
        outcome.replies.append(Say(smalltalk_key))
        outcome.replies.append(Say("back_to_question"))
        outcome.replies.extend(ask(q, ctx, pack))
        return outcome

    if q.entity_type == "imei":
        candidate = extract_imei_candidate(und.raw_text)
        if candidate is not None and not validate_imei(candidate).valid:
            _register_failure(env, outcome, q, "imei_invalid")
            return outcome

    extracted = _extract_answer(env, q)
    if isinstance(extracted, list):
        _offer_choices(env, outcome, q, extracted)
        return outcome
    if extracted is None:
        _register_failure(env, outcome, q, "answer_not_understood")
        return outcome

    if q.entity_type in SELF_CONFIRMING_TYPES:
        _commit(env, outcome, q.slot, extracted)
        return outcome

    ctx.pending_confirmation = PendingConfirmation(slot=q.slot, value=extracted)
    outcome.replies.append(Say("ask_confirm", {"value": value_label(pack, extracted)}))
    outcome.push.append(_confirm_state())
    return outcome


def commit_answer(env: CallbackEnv) -> RuleOutcome:
    """Affirmation while confirming: commit the slot, move on."""
    ctx = env.context
    outcome = RuleOutcome()
    pending = ctx.pending_confirmation
    if pending is None:  # stale confirmation state; recover by re-asking
        outcome.remove.append(USER_CONFIRMING_ANSWER)
        q = current_question(ctx, env.pack)
        if q:
            outcome.replies.extend(ask(q, ctx, env.pack))
        return outcome
    outcome.replies.append(Say("confirm_ok"))
    _commit(env, outcome, pending.slot, pending.value)
    return outcome


def reject_answer(env: CallbackEnv) -> RuleOutcome:
    """Negation while confirming: drop the proposal, re-ask the question."""
    ctx = env.context
    outcome = RuleOutcome()
    ctx.pending_confirmation = None
    outcome.remove.append(USER_CONFIRMING_ANSWER)
    q = current_question(ctx, env.pack)
    if q is None:
        _advance(env, outcome)
        return outcome
    count = ctx.question_failures.get(q.id, 0) + 1
    if count >= PROACTIVE_HELP_AFTER:
        ctx.question_failures[q.id] = 0
        outcome.replies.append(Say(q.help_key))
        outcome.replies.extend(ask(q, ctx, env.pack))
    else:
        ctx.question_failures[q.id] = count
        outcome.replies.append(Say("confirm_rejected"))
        outcome.replies.extend(ask(q, ctx, env.pack))
    return outcome


def skip_question(env: CallbackEnv) -> RuleOutcome:
    """Advance past the current question, but only when it is optional."""
    ctx, pack = env.context, env.pack
    outcome = RuleOutcome()
    q = current_question(ctx, pack)
    if q is None:
        _finalize(env, outcome)
        return outcome
    if q.optional:
        ctx.skipped_slots.add(q.slot)
        ctx.question_failures.pop(q.id, None)
        ctx.pending_confirmation = None
        outcome.replies.append(Say("skip_ok"))
        _advance(env, outcome)
    else:
        outcome.replies.append(Say("skip_refused"))
        outcome.replies.extend(ask(q, ctx, pack))
    return outcome


def question_help(env: CallbackEnv) -> RuleOutcome:
    outcome = RuleOutcome()
    q = current_question(env.context, env.pack)
    if q is None:
        outcome.replies.append(Say("capabilities"))
        return outcome
    outcome.replies.append(Say(q.help_key))
    return outcome


def question_example(env: CallbackEnv) -> RuleOutcome:
    outcome = RuleOutcome()
    q = current_question(env.context, env.pack)
    if q is None:
        outcome.replies.append(Say("capabilities"))
        return outcome
    outcome.replies.append(Say(q.example_key))
    return outcome


def restate_question(env: CallbackEnv) -> RuleOutcome:
    """A claim intent mid-claim resumes at the current question."""
    ctx, pack = env.context, env.pack
    outcome = RuleOutcome()
    outcome.replies.append(Say("claim_already_active"))
    q = current_question(ctx, pack)
    if q:
        outcome.replies.extend(ask(q, ctx, pack))
    return outcome


def select_choice(env: CallbackEnv) -> RuleOutcome:
    """A pressed (or numbered) choice commits without extra confirmation."""
    ctx, pack, und = env.context, env.pack, env.understanding
    outcome = RuleOutcome()
    chosen: PendingChoice | None = None
    choice_param = und.parameters.get("choice_id")
    if choice_param is not None:
        for c in ctx.pending_choices:
            if c.choice_id == choice_param.value:
                chosen = c
                break
    else:
        try:
            index = int(und.raw_text.strip())
        except ValueError:
            index = 0
        if 1 <= index <= len(ctx.pending_choices):
            chosen = ctx.pending_choices[index - 1]
    if chosen is None:
        outcome.replies.append(Say("choice_invalid"))
        if ctx.pending_choices:
            outcome.replies.append(
                send_choices(
                    None,
                    [Choice(c.choice_id, c.label) for c in ctx.pending_choices],
                )
            )
            outcome.push.append(_clarify_state())
        return outcome
    q = current_question(ctx, pack)
    if q is None:
        outcome.remove.append(CLARIFY_PHONE_MODEL)
        _finalize(env, outcome)
        return outcome
    kind = q.entity_type if q.entity_type in ("phone_model", "damage_type") else "text"
    value = EntityValue(kind=kind, value=chosen.canonical_value)
    outcome.replies.append(Say("choice_ok", {"value": value_label(pack, value)}))
    _commit(env, outcome, q.slot, value)
    return outcome


def reopen_answer(env: CallbackEnv) -> RuleOutcome:
    """Explicit correction intent re-opens a committed slot."""
    ctx, pack, und = env.context, env.pack, env.understanding
    outcome = RuleOutcome()
    slot_ref = und.parameters.get("slot_ref")
    slot = slot_ref.value if slot_ref else None
    if slot is None or (slot not in ctx.slots and slot not in ctx.skipped_slots):
        outcome.replies.append(Say("change_which"))
        return outcome
    ctx.slots.pop(slot, None)
    ctx.skipped_slots.discard(slot)
    ctx.pending_confirmation = None
    q = pack.question_by_slot(slot)
    if q is not None:
        ctx.question_failures.pop(q.id, None)
    outcome.replies.append(Say("change_ok"))
    q = current_question(ctx, pack)
    if q:
        outcome.replies.extend(ask(q, ctx, pack))
    return outcome


def ask_cancel(env: CallbackEnv) -> RuleOutcome:
    outcome = RuleOutcome()
    outcome.replies.append(Say("cancel_confirm"))
    return outcome  # CONFIRM_CANCEL is emitted by the rule


def cancel_claim(env: CallbackEnv) -> RuleOutcome:
    ctx = env.context
    outcome = RuleOutcome()
    _clear_frame(ctx)
    outcome.remove.extend(CLAIM_STATES)
    outcome.replies.append(Say("cancel_done"))
    return outcome


def resume_claim(env: CallbackEnv) -> RuleOutcome:
    ctx, pack = env.context, env.pack
    outcome = RuleOutcome()
    outcome.remove.append(CONFIRM_CANCEL)
    outcome.replies.append(Say("cancel_resume"))
    q = current_question(ctx, pack)
    if q:
        outcome.replies.extend(ask(q, ctx, pack))
    return outcome


def media_in_questionnaire(env: CallbackEnv) -> RuleOutcome:
    outcome = RuleOutcome()
    outcome.replies.append(Say("media_note"))
    q = current_question(env.context, env.pack)
    if q:
        outcome.replies.extend(ask(q, env.context, env.pack))
    return outcome


def media_note(env: CallbackEnv) -> RuleOutcome:
    return RuleOutcome(replies=[Say("media_note")])


def smalltalk(env: CallbackEnv) -> RuleOutcome:
    """Static, lowest-priority responses; the template key is rule data."""
    return RuleOutcome(replies=[Say(env.rule.args["template"])])


def remember_name(env: CallbackEnv) -> RuleOutcome:
    ctx, und = env.context, env.understanding
    outcome = RuleOutcome()
    name = und.parameters.get("first_name")
    if name is None:
        outcome.replies.append(Say("name_not_caught"))
        return outcome
    ctx.profile.first_name = name.value
    outcome.replies.append(Say("name_saved"))
    return outcome


def set_formality(env: CallbackEnv) -> RuleOutcome:
    """Stateless formality switch; the message is consumed by the change."""
    ctx, und = env.context, env.understanding
    outcome = RuleOutcome()
    detected = detect_formality(und.raw_text, ctx.profile.language)
    if detected in ("informal", "formal"):
        ctx.profile.formality = detected
    key = "formality_informal_ack" if ctx.profile.formality == "informal" else "formality_formal_ack"
    outcome.replies.append(Say(key))
    q = current_question(ctx, env.pack) if ctx.has_state(QUESTIONNAIRE) else None
    if q:
        outcome.replies.extend(ask(q, ctx, env.pack))
    return outcome


def emoji_reply(env: CallbackEnv) -> RuleOutcome:
    polarity = env.rule.args.get("polarity", "positive")
    key = "emoji_negative_reply" if polarity == "negative" else "emoji_positive_reply"
    return RuleOutcome(replies=[Say(key)])


def repair(env: CallbackEnv) -> RuleOutcome:
    """Terminal rule: bring the user back on track.

    The first two consecutive repairs restate the open question (or nudge
    toward what the bot can do); after that the bot offers a fresh start.
    """
    ctx, pack = env.context, env.pack
    outcome = RuleOutcome()
    if ctx.consecutive_fallbacks >= 3:
        outcome.replies.append(Say("repair_reset_offer"))
        return outcome
    q = current_question(ctx, pack) if ctx.has_state(QUESTIONNAIRE) else None
    if q is not None:
        outcome.replies.append(Say("repair_restate"))
        outcome.replies.extend(ask(q, ctx, pack))
    else:
        outcome.replies.append(Say("repair_nudge"))
    return outcome


def formality_change(understanding, context) -> bool:
    """Rule condition: fire the formality switch only on an actual change."""
    detected = detect_formality(understanding.raw_text, context.profile.language)
    return detected in ("informal", "formal") and detected != context.profile.formality


CALLBACKS = {
    "start_claim": start_claim,
    "handle_answer": handle_answer,
    "commit_answer": commit_answer,
    "reject_answer": reject_answer,
    "skip_question": skip_question,
    "question_help": question_help,
    "question_example": question_example,
    "restate_question": restate_question,
    "select_choice": select_choice,
    "reopen_answer": reopen_answer,
    "ask_cancel": ask_cancel,
    "cancel_claim": cancel_claim,
    "resume_claim": resume_claim,
    "media_in_questionnaire": media_in_questionnaire,
    "media_note": media_note,
    "smalltalk": smalltalk,
    "remember_name": remember_name,
    "set_formality": set_formality,
    "emoji_reply": emoji_reply,
    "repair": repair,
}

CONDITIONS = {
    "formality_change": formality_change,
}
