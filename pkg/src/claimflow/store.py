"""Durable per-user context and claim persistence.

One JSON document per user, replaced atomically on every save, plus an
append-only claim log. A memory-backed variant with the same surface
serves tests and the evaluation harness. No external database server:
conversations must survive a process restart on file storage alone.
"""

from __future__ import annotations

import copy
import json
import logging
import os
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path
from urllib.parse import quote, unquote

from .engine import DialogState
from .nlu import EntityValue
from .responder import UserProfile

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class StorageUnavailable(Exception):
    """The backing store cannot serve the request; never a silent reset."""


@dataclass
class PendingConfirmation:
    slot: str
    value: EntityValue


@dataclass
class PendingChoice:
    choice_id: str
    label: str
    canonical_value: str


@dataclass
class TranscriptEntry:
    turn: int
    direction: str  # "in" | "out"
    summary: str


@dataclass
class UserContext:
    """Everything the dialog knows about one user, across restarts."""

    user_id: str
    profile: UserProfile = field(default_factory=UserProfile)
    active_states: list[DialogState] = field(default_factory=list)
    slots: dict[str, EntityValue] = field(default_factory=dict)
    skipped_slots: set[str] = field(default_factory=set)
    pending_confirmation: PendingConfirmation | None = None
    pending_choices: list[PendingChoice] = field(default_factory=list)
    question_failures: dict[str, int] = field(default_factory=dict)
    turn_counter: int = 0
    consecutive_fallbacks: int = 0
    transcript: list[TranscriptEntry] = field(default_factory=list)

    def has_state(self, name: str) -> bool:
        return any(s.name == name for s in self.active_states)

    def get_state(self, name: str) -> DialogState | None:
        for state in self.active_states:
            if state.name == name:
                return state
        return None

    def push_state(self, state: DialogState) -> None:
        # Re-emitting an active name replaces the prior instance.
        self.active_states = [s for s in self.active_states if s.name != state.name]
        self.active_states.append(state)

    def drop_state(self, name: str) -> None:
        self.active_states = [s for s in self.active_states if s.name != name]

    def record(self, direction: str, summary: str) -> None:
        self.transcript.append(TranscriptEntry(self.turn_counter, direction, summary))

    def check_invariants(self) -> None:
        names = [s.name for s in self.active_states]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate active state names: {names}")
        if any(s.lifetime is not None and s.lifetime < 1 for s in self.active_states):
            raise ValueError("expired state lifetime in context")
        if self.turn_counter < 0:
            raise ValueError("negative turn counter")


@dataclass
class ClaimRecord:
    """A completed damage claim, ready for downstream processing."""

    user_id: str
    slots: dict[str, EntityValue]
    completed_at: str
    transcript_ref: str
    claim_id: str = ""

    def check_invariants(self, required_slots: list[str] | None = None) -> None:
        for slot in required_slots or []:
            if slot not in self.slots:
                raise ValueError(f"claim is missing required slot {slot!r}")
        imei = self.slots.get("imei")
        if imei is not None and imei.kind != "imei":
            raise ValueError("imei slot must hold a validated imei value")


def _entity_to_dict(value: EntityValue) -> dict:
    out = {"kind": value.kind, "value": value.value}
    if value.granularity:
        out["granularity"] = value.granularity
    return out


def _entity_from_dict(data: dict) -> EntityValue:
    return EntityValue(
        kind=data["kind"], value=data["value"], granularity=data.get("granularity")
    )


def context_to_dict(ctx: UserContext) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "user_id": ctx.user_id,
        "profile": {
            "first_name": ctx.profile.first_name,
            "formality": ctx.profile.formality,
            "mood": ctx.profile.mood,
            "language": ctx.profile.language,
        },
        "active_states": [
            {
                "name": s.name,
                "lifetime": s.lifetime,
                "priority": s.priority,
                "created_turn": s.created_turn,
            }
            for s in ctx.active_states
        ],
        "slots": {k: _entity_to_dict(v) for k, v in ctx.slots.items()},
        "skipped_slots": sorted(ctx.skipped_slots),
        "pending_confirmation": (
            {
                "slot": ctx.pending_confirmation.slot,
                "value": _entity_to_dict(ctx.pending_confirmation.value),
            }
            if ctx.pending_confirmation
            else None
        ),
        "pending_choices": [
            {"choice_id": c.choice_id, "label": c.label, "canonical_value": c.canonical_value}
            for c in ctx.pending_choices
        ],
        "question_failures": dict(ctx.question_failures),
        "turn_counter": ctx.turn_counter,
        "consecutive_fallbacks": ctx.consecutive_fallbacks,
        "transcript": [
            {"turn": t.turn, "direction": t.direction, "summary": t.summary}
            for t in ctx.transcript
        ],
    }


def context_from_dict(data: dict) -> UserContext:
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise StorageUnavailable(f"unsupported context schema_version {version!r}")
    profile = data["profile"]
    return UserContext(
        user_id=data["user_id"],
        profile=UserProfile(
            first_name=profile.get("first_name"),
            formality=profile["formality"],
            mood=profile["mood"],
            language=profile["language"],
        ),
        active_states=[
            DialogState(
                name=s["name"],
                lifetime=s["lifetime"],
                priority=s["priority"],
                created_turn=s["created_turn"],
            )
            for s in data["active_states"]
        ],
        slots={k: _entity_from_dict(v) for k, v in data["slots"].items()},
        skipped_slots=set(data["skipped_slots"]),
        pending_confirmation=(
            PendingConfirmation(
                slot=data["pending_confirmation"]["slot"],
                value=_entity_from_dict(data["pending_confirmation"]["value"]),
            )
            if data.get("pending_confirmation")
            else None
        ),
        pending_choices=[
            PendingChoice(
                choice_id=c["choice_id"],
                label=c["label"],
                canonical_value=c["canonical_value"],
            )
            for c in data["pending_choices"]
        ],
        question_failures=dict(data["question_failures"]),
        turn_counter=data["turn_counter"],
        consecutive_fallbacks=data["consecutive_fallbacks"],
        transcript=[
            TranscriptEntry(turn=t["turn"], direction=t["direction"], summary=t["summary"])
            for t in data["transcript"]
        ],
    )


def claim_to_dict(record: ClaimRecord) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "claim_id": record.claim_id,
        "user_id": record.user_id,
        "slots": {k: _entity_to_dict(v) for k, v in record.slots.items()},
        "completed_at": record.completed_at,
        "transcript_ref": record.transcript_ref,
    }


def _fresh_context(user_id: str, language_hint: str | None, default_language: str) -> UserContext:
    profile = UserProfile(language=language_hint or default_language)
    return UserContext(user_id=user_id, profile=profile)


class MemoryStore:
    """Context and claim storage living in process memory."""

    def __init__(self, default_language: str = "de"):
        self.default_language = default_language
        self._contexts: dict[str, UserContext] = {}
        self._claims: list[dict] = []
        self._lock = threading.Lock()

    def load_context(self, user_id: str, language_hint: str | None = None) -> UserContext:
        with self._lock:
            ctx = self._contexts.get(user_id)
            if ctx is None:
                return _fresh_context(user_id, language_hint, self.default_language)
            return copy.deepcopy(ctx)

    def save_context(self, ctx: UserContext) -> None:
        ctx.check_invariants()
        with self._lock:
            self._contexts[ctx.user_id] = copy.deepcopy(ctx)

    def persist_claim(self, record: ClaimRecord) -> str:
        record.check_invariants()
        with self._lock:
            claim_id = f"C-{len(self._claims) + 1:06d}"
            stored = claim_to_dict(record)
            stored["claim_id"] = claim_id
            self._claims.append(stored)
            return claim_id

    def claims(self) -> list[dict]:
        with self._lock:
            return [dict(c) for c in self._claims]


class FileStore:
    """File-backed storage: contexts/<user_id>.json plus claims/claims.jsonl.

    Saves replace the user's document atomically (write to a temp file in
    the same directory, fsync, rename), so a crash between two messages
    leaves either the old or the new context, never a torn one. Claim ids
    are monotonic; the counter is recovered by scanning the log at open.
    Single-process use is assumed, matching the per-user FIFO gate above.
    """

    def __init__(self, root: str | Path, default_language: str = "de"):
        self.root = Path(root)
        self.default_language = default_language
        self.contexts_dir = self.root / "contexts"
        self.claims_dir = self.root / "claims"
        self.contexts_dir.mkdir(parents=True, exist_ok=True)
        self.claims_dir.mkdir(parents=True, exist_ok=True)
        self._claims_path = self.claims_dir / "claims.jsonl"
        self._lock = threading.Lock()
        self._claim_count = self._scan_claim_count()

    def _scan_claim_count(self) -> int:
        if not self._claims_path.exists():
            return 0
        try:
            with self._claims_path.open("r", encoding="utf-8") as fh:
                return sum(1 for line in fh if line.strip())
        except OSError as exc:
            raise StorageUnavailable(f"cannot read claim log: {exc}") from exc

    def _context_path(self, user_id: str) -> Path:
        return self.contexts_dir / f"{quote(user_id, safe='')}.json"

    def load_context(self, user_id: str, language_hint: str | None = None) -> UserContext:
        path = self._context_path(user_id)
        if not path.exists():
            return _fresh_context(user_id, language_hint, self.default_language)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise StorageUnavailable(f"corrupt context document {path.name}: {exc}") from exc
        try:
            return context_from_dict(data)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, StorageUnavailable):
                raise
            raise StorageUnavailable(f"invalid context document {path.name}: {exc}") from exc

    def save_context(self, ctx: UserContext) -> None:
        ctx.check_invariants()
        path = self._context_path(ctx.user_id)
        payload = json.dumps(context_to_dict(ctx), ensure_ascii=False, indent=None)
        try:
            fd, tmp_name = tempfile.mkstemp(dir=self.contexts_dir, prefix=".tmp-", suffix=".json")
            try:
                with os.fdopen(fd, "w", encoding="utf-8") as fh:
                    fh.write(payload)
                    fh.flush()
                    os.fsync(fh.fileno())
                os.replace(tmp_name, path)
            except BaseException:
                try:
                    os.unlink(tmp_name)
                except OSError:
                    pass
                raise
        except OSError as exc:
            raise StorageUnavailable(f"cannot save context for {ctx.user_id!r}: {exc}") from exc

    def persist_claim(self, record: ClaimRecord) -> str:
        record.check_invariants()
        with self._lock:
            claim_id = f"C-{self._claim_count + 1:06d}"
            stored = claim_to_dict(record)
            stored["claim_id"] = claim_id
            line = json.dumps(stored, ensure_ascii=False)
            try:
                with self._claims_path.open("a", encoding="utf-8") as fh:
                    fh.write(line + "\n")
                    fh.flush()
                    os.fsync(fh.fileno())
            except OSError as exc:
                raise StorageUnavailable(f"cannot append claim: {exc}") from exc
            self._claim_count += 1
            return claim_id

    def claims(self) -> list[dict]:
        if not self._claims_path.exists():
            return []
        out = []
        with self._claims_path.open("r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    out.append(json.loads(line))
        return out

    def known_users(self) -> list[str]:
        return sorted(
            unquote(p.stem) for p in self.contexts_dir.glob("*.json") if not p.name.startswith(".")
        )
