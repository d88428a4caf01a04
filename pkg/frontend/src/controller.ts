import { ApiError, ChatApi } from "./api.js";
import type { OutgoingPayload, WireAction, WireChoice } from "./wire.js";

export interface UiMessage {
  direction: "user" | "bot";
  text?: string;
  choices?: WireChoice[];
  timestamp: number;
  /** Set on a user message while its reply is still outstanding. */
  pending?: boolean;
  failed?: boolean;
}

export interface KeyValueStorage {
  getItem(key: string): string | null;
  setItem(key: string, value: string): void;
}

const USER_ID_KEY = "claimflow.user_id";

function randomUserId(): string {
  return `web-${Math.random().toString(36).slice(2, 10)}`;
}

/**
 * Resolve the durable user id. The client itself is stateless: holding the
 * id in browser storage is what lets a refresh resume the server-side
 * conversation.
 */
export function resolveUserId(storage: KeyValueStorage): string {
  const existing = storage.getItem(USER_ID_KEY);
  if (existing) {
    return existing;
  }
  const fresh = randomUserId();
  storage.setItem(USER_ID_KEY, fresh);
  return fresh;
}

/**
 * Conversation state machine behind the chat view.
 *
 * Holds the transcript in server action order, keeps at most one request
 * in flight (further input queues client-side), tracks the typing
 * indicator, and disables quick-reply buttons on anything but the newest
 * bot message.
 */
export class ChatController {
  readonly messages: UiMessage[] = [];
  typingVisible = false;
  claimStored = false;
  errorMessage: string | null = null;
  resumed = false;

  private inFlight = false;
  private readonly queue: OutgoingPayload[] = [];
  private failedPayload: OutgoingPayload | null = null;
  private readonly listeners: (() => void)[] = [];

  constructor(
    private readonly api: ChatApi,
    readonly userId: string,
    private readonly now: () => number = Date.now,
  ) {}

  onChange(listener: () => void): void {
    this.listeners.push(listener);
  }

  private notify(): void {
    for (const listener of this.listeners) {
      listener();
    }
  }

  /** Restore visible history when the server already knows this user. */
  async init(): Promise<void> {
    const context = await this.api.fetchContext(this.userId);
    if (context === null) {
      return;
    }
    this.resumed = true;
    for (const entry of context.transcript_tail) {
      if (!entry.summary.startsWith("text:")) {
        continue;
      }
      this.messages.push({
        direction: entry.direction === "in" ? "user" : "bot",
        text: entry.summary.slice("text:".length),
        timestamp: this.now(),
      });
    }
    this.notify();
  }

  get busy(): boolean {
    return this.inFlight;
  }

  /** The failed input, so the view can put it back into the box. */
  get retryText(): string | null {
    if (this.failedPayload && "text" in this.failedPayload) {
      return this.failedPayload.text;
    }
    return null;
  }

  sendText(text: string): Promise<void> {
    const trimmed = text.trim();
    if (!trimmed) {
      return Promise.resolve();
    }
    return this.submit({ text: trimmed });
  }

  sendChoice(choiceId: string, label?: string): Promise<void> {
    return this.submit({ choice_id: choiceId }, label);
  }

  /** Quick-reply buttons are live only on the newest bot message. */
  choicesEnabled(index: number): boolean {
    const message = this.messages[index];
    if (!message || message.direction !== "bot" || !message.choices) {
      return false;
    }
    return index === this.messages.length - 1;
  }

  async retry(): Promise<void> {
    const payload = this.failedPayload;
    if (!payload) {
      return;
    }
    this.failedPayload = null;
    this.errorMessage = null;
    // drop the failed bubble; submit() appends a fresh one
    const failedIndex = this.messages.findIndex((m) => m.failed);
    if (failedIndex >= 0) {
      this.messages.splice(failedIndex, 1);
    }
    await this.submit(payload, undefined);
  }

  private async submit(payload: OutgoingPayload, choiceLabel?: string): Promise<void> {
    if (this.inFlight) {
      this.queue.push(payload);
      this.notify();
      return;
    }
    await this.dispatch(payload, choiceLabel);
    while (!this.inFlight && this.queue.length > 0 && !this.errorMessage) {
      await this.dispatch(this.queue.shift()!, undefined);
    }
  }

  private async dispatch(payload: OutgoingPayload, choiceLabel?: string): Promise<void> {
    const bubble: UiMessage = {
      direction: "user",
      text:
        "text" in payload
          ? payload.text
          : "choice_id" in payload
            ? (choiceLabel ?? payload.choice_id)
            : payload.media_uri,
      timestamp: this.now(),
      pending: true,
    };
    this.messages.push(bubble);
    this.inFlight = true;
    this.typingVisible = true; // at most one indicator, shown while waiting
    this.errorMessage = null;
    this.notify();

    let actions: WireAction[];
    try {
      actions = await this.api.sendMessage(this.userId, payload);
    } catch (err) {
      this.inFlight = false;
      this.typingVisible = false;
      bubble.pending = false;
      bubble.failed = true;
      this.failedPayload = payload;
      this.errorMessage = err instanceof ApiError ? err.message : String(err);
      this.notify();
      return;
    }

    this.inFlight = false;
    bubble.pending = false;
    this.applyActions(actions);
    this.notify();
  }

  /** Append bot actions in server order; order is never rearranged. */
  private applyActions(actions: WireAction[]): void {
    for (const action of actions) {
      switch (action.kind) {
        case "typing_on":
          this.typingVisible = true;
          break;
        case "send_text":
          this.typingVisible = false;
          this.messages.push({
            direction: "bot",
            text: action.text,
            timestamp: this.now(),
          });
          break;
        case "send_choices":
          this.typingVisible = false;
          this.messages.push({
            direction: "bot",
            text: action.text,
            choices: action.choices ?? [],
            timestamp: this.now(),
          });
          break;
        case "store_claim":
          this.claimStored = true;
          break;
        default:
          break; // unknown kinds are ignored, forward compatible
      }
    }
    if (actions.length > 0 && actions[actions.length - 1]!.kind !== "typing_on") {
      this.typingVisible = false;
    }
  }
}
