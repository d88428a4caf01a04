"""Service wiring: adapters -> nlu -> engine -> responder -> store.

:class:`ChatService` runs the synchronous per-message pipeline behind a
per-user FIFO gate; :func:`create_app` exposes it over HTTP with pydantic
wire models. The wire schema is the one the web chat client and any other
channel adapter speak.
"""

from __future__ import annotations

import asyncio
import dataclasses
import logging
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, ConfigDict
from starlette.concurrency import run_in_threadpool
from typing import Literal

from . import claims
from .content import PackError, bundled_pack_dir, load_packs, validate_pack
from .engine import Engine, build_router
from .messaging import (
    ChannelCapabilities,
    ChatAction,
    ChatMessage,
    ChoicePayload,
    MediaPayload,
    TextPayload,
    WEB_CAPABILITIES,
    normalize_incoming,
    send_text,
)
from .nlu import Nlu, choice_understanding, media_understanding
from .responder import Responder, Say, UserProfile
from .store import FileStore, MemoryStore, StorageUnavailable, UserContext

logger = logging.getLogger(__name__)

DEFAULT_REQUEST_TIMEOUT = 10.0


class ServiceError(Exception):
    pass


@dataclass
class ServiceConfig:
    pack_path: Path | str = field(default_factory=bundled_pack_dir)
    storage_path: Path | str | None = None  # None: in-memory store
    default_language: str = "de"
    fallback_threshold: float | None = None
    port: int = 8000
    request_timeout: float = DEFAULT_REQUEST_TIMEOUT
    reference_time: datetime | None = None  # fixed clock for deterministic runs


def _action_summary(action: ChatAction) -> str:
    if action.kind == "send_text":
        return f"text:{action.text}"
    if action.kind == "send_choices":
        return "choices:" + ",".join(c.choice_id for c in action.choices)
    if action.kind == "store_claim":
        return f"store_claim:{action.claim_id}"
    return action.kind


def _message_summary(message: ChatMessage) -> str:
    payload = message.payload
    if isinstance(payload, TextPayload):
        return f"text:{payload.text}"
    if isinstance(payload, ChoicePayload):
        return f"choice:{payload.choice_id}"
    return f"media:{payload.kind}:{payload.uri}"


class ChatService:
    """The full message pipeline over one store and one content pack set.

    Startup fails fast on an invalid pack. Per user, messages are handled
    strictly one at a time in arrival order; different users proceed
    concurrently. The context is saved only after the reply is fully
    planned, so a failed message can simply be retried.
    """

    def __init__(self, config: ServiceConfig):
        self.config = config
        packs = load_packs(config.pack_path)
        if config.fallback_threshold is not None:
            packs = {
                lang: dataclasses.replace(pack, fallback_threshold=config.fallback_threshold)
                for lang, pack in packs.items()
            }
        for pack in packs.values():
            problems = validate_pack(pack, set(claims.CALLBACKS), claims.REQUIRED_STATES)
            if problems:
                raise PackError(f"pack {pack.language!r} invalid: " + "; ".join(problems))
        if config.default_language not in packs:
            raise ServiceError(
                f"default language {config.default_language!r} has no content pack"
            )
        self.packs = packs
        self.nlu = Nlu(packs)
        self.responder = Responder(packs)
        if config.storage_path is None:
            self.store = MemoryStore(default_language=config.default_language)
        else:
            self.store = FileStore(config.storage_path, default_language=config.default_language)
        self.engines = {
            lang: Engine(
                router=build_router(pack, claims.CONDITIONS),
                callbacks=claims.CALLBACKS,
                pack=pack,
                store=self.store,
                now=self._now,
            )
            for lang, pack in packs.items()
        }
        self._locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()

    def _now(self) -> datetime:
        return self.config.reference_time or datetime.now(timezone.utc)

    def _user_lock(self, user_id: str) -> threading.Lock:
        with self._locks_guard:
            lock = self._locks.get(user_id)
            if lock is None:
                lock = self._locks[user_id] = threading.Lock()
            return lock

    def _understand(self, message: ChatMessage, ctx: UserContext):
        language = ctx.profile.language
        payload = message.payload
        if isinstance(payload, TextPayload):
            return self.nlu.understand(payload.text, language, self._now())
        if isinstance(payload, ChoicePayload):
            return choice_understanding(payload.choice_id, language)
        return media_understanding(payload.kind, language)

    def _apology(self, profile: UserProfile, caps: ChannelCapabilities) -> list[ChatAction]:
        try:
            return self.responder.realize_reply([Say("apology_error")], profile, turn=0, caps=caps)
        except Exception:  # the apology itself must never fail
            logger.exception("apology template failed")
            return [send_text("Sorry, something went wrong. Please try again.")]

    def process_wire(
        self,
        raw: dict,
        channel_id: str = "web",
        caps: ChannelCapabilities = WEB_CAPABILITIES,
        language_hint: str | None = None,
    ) -> list[ChatAction]:
        """Handle one wire payload end to end and return the reply actions.

        Wire-schema violations raise (they are the caller's error); any
        failure past that point maps to a safe apology reply and the
        context is left unsaved so the message can be retried.
        """
        user_id = raw.get("user_id") if isinstance(raw, dict) else None
        if not isinstance(user_id, str) or not user_id:
            from .messaging import MalformedPayload

            raise MalformedPayload("user_id must be a non-empty string")
        with self._user_lock(user_id):
            return self._process_locked(raw, channel_id, caps, language_hint)

    def _process_locked(
        self,
        raw: dict,
        channel_id: str,
        caps: ChannelCapabilities,
        language_hint: str | None,
    ) -> list[ChatAction]:
        user_id = raw["user_id"]
        hint = language_hint or self.config.default_language
        try:
            ctx = self.store.load_context(user_id, language_hint=hint)
        except StorageUnavailable:
            logger.exception("context load failed for %s", user_id)
            return self._apology(UserProfile(language=hint), caps)

        message = normalize_incoming(
            raw,
            channel_id,
            received_at=self._now(),
            generated_message_id=f"m-{ctx.turn_counter + 1}",
        )
        try:
            ctx.turn_counter += 1
            ctx.record("in", _message_summary(message))
            understanding = self._understand(message, ctx)
            engine = self.engines[ctx.profile.language]
            result = engine.plan(understanding, ctx)
            new_ctx = result.context
            actions = self.responder.realize_reply(
                result.replies, new_ctx.profile, turn=new_ctx.turn_counter, caps=caps
            )
            for action in actions:
                new_ctx.record("out", _action_summary(action))
            self.store.save_context(new_ctx)
            return actions
        except Exception:
            logger.exception("message pipeline failed for %s", user_id)
            return self._apology(ctx.profile, caps)

    def context_summary(self, user_id: str) -> dict | None:
        """Read-only context view for the debug endpoint; None if unseen."""
        ctx = self.store.load_context(user_id)
        if ctx.turn_counter == 0:
            return None
        pack = self.packs.get(ctx.profile.language)
        question = claims.current_question(ctx, pack) if pack and ctx.has_state(claims.QUESTIONNAIRE) else None
        return {
            "user_id": ctx.user_id,
            "turn_counter": ctx.turn_counter,
            "profile": {
                "first_name": ctx.profile.first_name,
                "formality": ctx.profile.formality,
                "mood": ctx.profile.mood,
                "language": ctx.profile.language,
            },
            "active_states": [
                {"name": s.name, "lifetime": s.lifetime, "priority": s.priority}
                for s in ctx.active_states
            ],
            "slots": {slot: value.render() for slot, value in ctx.slots.items()},
            "skipped_slots": sorted(ctx.skipped_slots),
            "pending_confirmation": (
                {"slot": ctx.pending_confirmation.slot, "value": ctx.pending_confirmation.value.render()}
                if ctx.pending_confirmation
                else None
            ),
            "current_question": question.id if question else None,
            "consecutive_fallbacks": ctx.consecutive_fallbacks,
            "transcript_tail": [
                {"turn": t.turn, "direction": t.direction, "summary": t.summary}
                for t in ctx.transcript[-20:]
            ],
        }


# --- HTTP surface -------------------------------------------------------


class WireMessage(BaseModel):
    model_config = ConfigDict(extra="forbid")

    user_id: str
    channel: Literal["web"] = "web"
    text: str | None = None
    choice_id: str | None = None
    media_uri: str | None = None


class WireChoice(BaseModel):
    choice_id: str
    label: str


class WireAction(BaseModel):
    kind: str
    text: str | None = None
    choices: list[WireChoice] | None = None


class WireReply(BaseModel):
    actions: list[WireAction]


def _to_wire_action(action: ChatAction) -> WireAction:
    return WireAction(
        kind=action.kind,
        text=action.text,
        choices=[WireChoice(choice_id=c.choice_id, label=c.label) for c in action.choices]
        or None,
    )


def create_app(service: ChatService, frontend_dir: Path | str | None = None) -> FastAPI:
    app = FastAPI(title="claimflow", version="0.1.0")

    @app.get("/healthz")
    async def healthz() -> dict:
        return {"status": "ok"}

    @app.post("/api/v1/messages", response_model=WireReply, response_model_exclude_none=True)
    async def post_message(message: WireMessage) -> WireReply:
        from .messaging import EmptyMessage, MalformedPayload

        raw = message.model_dump(exclude_none=True)
        try:
            actions = await asyncio.wait_for(
                run_in_threadpool(service.process_wire, raw, "web", WEB_CAPABILITIES),
                timeout=service.config.request_timeout,
            )
        except (MalformedPayload, EmptyMessage) as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        except asyncio.TimeoutError:
            logger.error("request timed out for user %s", message.user_id)
            actions = service._apology(
                UserProfile(language=service.config.default_language), WEB_CAPABILITIES
            )
        return WireReply(actions=[_to_wire_action(a) for a in actions])

    @app.get("/api/v1/context/{user_id}")
    async def get_context(user_id: str) -> dict:
        try:
            summary = await run_in_threadpool(service.context_summary, user_id)
        except StorageUnavailable as exc:
            raise HTTPException(status_code=500, detail=str(exc)) from exc
        if summary is None:
            raise HTTPException(status_code=404, detail=f"no conversation for {user_id!r}")
        return summary

    if frontend_dir is not None:
        frontend_path = Path(frontend_dir)
        if frontend_path.is_dir():
            from starlette.staticfiles import StaticFiles

            app.mount("/", StaticFiles(directory=frontend_path, html=True), name="webchat")

    return app
