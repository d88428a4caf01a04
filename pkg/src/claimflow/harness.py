"""Scripted-conversation evaluation harness.

Replays persona scripts against an in-process service over the loopback
channel, checks per-step expectations, and aggregates task completion.
With a fixed reference time the whole stack is deterministic, so the
machine-readable report is byte-identical across reruns; wall-clock
timings appear only in the human-readable table.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import yaml

from .content import bundled_script_dir
from .messaging import ChatAction, LoopbackChannel, action_to_wire
from .service import ChatService, ServiceConfig

PERSONAS = ("cooperative", "terse", "off_topic", "impatient")

# Frozen so "yesterday" in a script always resolves to the same day.
DEFAULT_REFERENCE_TIME = datetime(2024, 5, 10, 9, 0, 0, tzinfo=timezone.utc)

MAX_TURNS = 60


class HarnessError(Exception):
    pass


class ExpectationFailed(HarnessError):
    def __init__(self, script: str, step: int, failures: list[str]):
        self.script = script
        self.step = step
        self.failures = failures
        super().__init__(f"{script} step {step}: " + "; ".join(failures))


@dataclass(frozen=True)
class Expectation:
    kind: str | None = None
    contains: str | None = None
    not_contains: str | None = None
    state: str | None = None
    no_state: str | None = None
    slot: str | None = None
    slot_value: dict[str, str] = field(default_factory=dict)

    def is_empty(self) -> bool:
        return not any(
            (self.kind, self.contains, self.not_contains, self.state, self.no_state, self.slot, self.slot_value)
        )


@dataclass(frozen=True)
class ScriptStep:
    say: str | None = None
    choose: str | None = None
    media: str | None = None
    expect: Expectation = Expectation()


@dataclass(frozen=True)
class Script:
    name: str
    persona: str
    language: str
    steps: tuple[ScriptStep, ...]
    user_id: str

    def __post_init__(self) -> None:
        if not self.steps:
            raise HarnessError(f"script {self.name!r} has no steps")
        if self.persona not in PERSONAS:
            raise HarnessError(f"script {self.name!r} has unknown persona {self.persona!r}")


def load_script(path: str | Path) -> Script:
    raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, dict):
        raise HarnessError(f"script {path} must be a mapping")
    steps = []
    for entry in raw.get("steps") or []:
        expect_raw = entry.get("expect") or {}
        steps.append(
            ScriptStep(
                say=entry.get("say"),
                choose=entry.get("choose"),
                media=entry.get("media"),
                expect=Expectation(
                    kind=expect_raw.get("kind"),
                    contains=expect_raw.get("contains"),
                    not_contains=expect_raw.get("not_contains"),
                    state=expect_raw.get("state"),
                    no_state=expect_raw.get("no_state"),
                    slot=expect_raw.get("slot"),
                    slot_value=dict(expect_raw.get("slot_value") or {}),
                ),
            )
        )
    name = raw.get("name") or Path(path).stem
    return Script(
        name=name,
        persona=raw.get("persona", "cooperative"),
        language=raw.get("language", "en"),
        steps=tuple(steps),
        user_id=raw.get("user_id") or f"script-{name}",
    )


def load_scripts(path: str | Path | None = None) -> list[Script]:
    base = Path(path) if path is not None else bundled_script_dir()
    if base.is_file():
        return [load_script(base)]
    files = sorted(base.glob("*.yaml"))
    if not files:
        raise HarnessError(f"no scripts found under {base}")
    return [load_script(f) for f in files]


@dataclass
class StepResult:
    index: int
    sent: dict
    actions: list[dict]
    failures: list[str]


@dataclass
class TranscriptReport:
    script: str
    persona: str
    language: str
    completion: bool
    turns: int
    duration_s: float
    steps: list[StepResult]

    @property
    def failures(self) -> list[str]:
        out = []
        for step in self.steps:
            out.extend(f"step {step.index}: {f}" for f in step.failures)
        return out


def _wire_for(step: ScriptStep, user_id: str, channel: LoopbackChannel) -> dict:
    if step.say is not None:
        return channel.wire_text(user_id, step.say)
    if step.choose is not None:
        return channel.wire_choice(user_id, step.choose)
    if step.media is not None:
        return channel.wire_media(user_id, step.media)
    raise HarnessError("script step must have one of say/choose/media")


def _check_expectation(
    expect: Expectation, actions: list[ChatAction], service: ChatService, user_id: str
) -> list[str]:
    failures: list[str] = []
    kinds = [a.kind for a in actions]
    texts = " | ".join(
        [a.text for a in actions if a.text]
        + [c.label for a in actions for c in a.choices]
    )
    if expect.kind and expect.kind not in kinds:
        failures.append(f"expected action kind {expect.kind!r}, got {kinds}")
    if expect.contains and expect.contains not in texts:
        failures.append(f"expected reply to contain {expect.contains!r}, got {texts!r}")
    if expect.not_contains and expect.not_contains in texts:
        failures.append(f"reply must not contain {expect.not_contains!r}, got {texts!r}")
    if expect.state or expect.no_state or expect.slot or expect.slot_value:
        ctx = service.store.load_context(user_id)
        state_names = {s.name for s in ctx.active_states}
        if expect.state and expect.state not in state_names:
            failures.append(f"expected state {expect.state!r} active, got {sorted(state_names)}")
        if expect.no_state and expect.no_state in state_names:
            failures.append(f"state {expect.no_state!r} should not be active")
        if expect.slot and expect.slot not in ctx.slots:
            failures.append(f"expected slot {expect.slot!r} filled, got {sorted(ctx.slots)}")
        for slot, value in expect.slot_value.items():
            actual = ctx.slots.get(slot)
            if actual is None or actual.value != value:
                failures.append(
                    f"expected slot {slot!r} == {value!r}, got {actual.value if actual else None!r}"
                )
    return failures


def run_script(script: Script, service: ChatService, *, strict: bool = False) -> TranscriptReport:
    """Execute one script over a loopback channel; records actions and
    expectation failures per step."""
    started = time.perf_counter()
    channel = LoopbackChannel()
    completion = False
    steps: list[StepResult] = []
    for index, step in enumerate(script.steps):
        raw = _wire_for(step, script.user_id, channel)
        actions = service.process_wire(
            raw, channel.channel_id, channel.capabilities, language_hint=script.language
        )
        channel.dispatch(script.user_id, actions)
        if any(a.kind == "store_claim" for a in actions):
            completion = True
        failures = _check_expectation(step.expect, actions, service, script.user_id)
        steps.append(
            StepResult(
                index=index,
                sent={k: v for k, v in raw.items() if k not in ("user_id", "channel")},
                actions=[action_to_wire(a) for a in actions],
                failures=failures,
            )
        )
        if failures and strict:
            raise ExpectationFailed(script.name, index, failures)
    duration = time.perf_counter() - started
    return TranscriptReport(
        script=script.name,
        persona=script.persona,
        language=script.language,
        completion=completion,
        turns=len(script.steps),
        duration_s=duration,
        steps=steps,
    )


@dataclass
class SuiteReport:
    reports: list[TranscriptReport]

    @property
    def completion_rate(self) -> float:
        if not self.reports:
            return 0.0
        return sum(1 for r in self.reports if r.completion and not r.failures) / len(self.reports)

    @property
    def mean_turns(self) -> float:
        return sum(r.turns for r in self.reports) / len(self.reports)

    @property
    def total_duration_s(self) -> float:
        return sum(r.duration_s for r in self.reports)

    def ok(self) -> bool:
        return self.completion_rate == 1.0 and all(r.turns <= MAX_TURNS for r in self.reports)

    def to_machine_dict(self) -> dict:
        # Deterministic: no wall-clock fields in here.
        return {
            "suite": {
                "scripts": len(self.reports),
                "completion_rate": self.completion_rate,
                "mean_turns": self.mean_turns,
            },
            "results": [
                {
                    "script": r.script,
                    "persona": r.persona,
                    "language": r.language,
                    "completion": r.completion,
                    "turns": r.turns,
                    "steps": [
                        {"sent": s.sent, "actions": s.actions, "failures": s.failures}
                        for s in r.steps
                    ],
                }
                for r in sorted(self.reports, key=lambda r: r.script)
            ],
        }

    def to_machine_json(self) -> str:
        return json.dumps(self.to_machine_dict(), sort_keys=True, ensure_ascii=False, indent=2)

    def to_text_table(self) -> str:
        header = f"{'script':34} {'persona':12} {'turns':>5} {'ms':>7}  ok"
        lines = [header, "-" * len(header)]
        for r in sorted(self.reports, key=lambda r: r.script):
            ok = "yes" if r.completion and not r.failures else "NO"
            lines.append(
                f"{r.script:34} {r.persona:12} {r.turns:>5} {r.duration_s * 1000:>7.1f}  {ok}"
            )
            for failure in r.failures:
                lines.append(f"    ! {failure}")
        lines.append("-" * len(header))
        lines.append(
            f"completion rate {self.completion_rate:.2f}  "
            f"mean turns {self.mean_turns:.1f}  "
            f"total {self.total_duration_s:.2f}s"
        )
        return "\n".join(lines)


def default_service(languages_needed: set[str] | None = None) -> ChatService:
    """In-memory service with the frozen reference clock."""
    return ChatService(ServiceConfig(reference_time=DEFAULT_REFERENCE_TIME))


def run_suite(
    scripts: list[Script],
    service: ChatService | None = None,
    *,
    parallel: bool = False,
) -> SuiteReport:
    """Run every script; distinct users, one shared service.

    ``parallel`` runs scripts concurrently to exercise the per-user FIFO
    gate; results are identical to the sequential run because scripts
    never share a user id.
    """
    if not scripts:
        raise HarnessError("empty script suite")
    names = [s.name for s in scripts]
    if len(set(names)) != len(names):
        raise HarnessError("duplicate script names in suite")
    service = service or default_service()
    if parallel:
        with ThreadPoolExecutor(max_workers=min(8, len(scripts))) as pool:
            reports = list(pool.map(lambda s: run_script(s, service), scripts))
    else:
        reports = [run_script(s, service) for s in scripts]
    return SuiteReport(reports=reports)
