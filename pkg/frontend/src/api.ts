import type { OutgoingPayload, WireAction } from "./wire.js";

export class ApiError extends Error {
  constructor(
    message: string,
    public readonly status?: number,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

export interface ContextSummary {
  user_id: string;
  turn_counter: number;
  current_question: string | null;
  transcript_tail: { turn: number; direction: "in" | "out"; summary: string }[];
}

export class ChatApi {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchFn: typeof fetch = fetch,
  ) {}

  async sendMessage(userId: string, payload: OutgoingPayload): Promise<WireAction[]> {
    let response: Response;
    try {
      response = await this.fetchFn(`${this.baseUrl}/api/v1/messages`, {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify({ user_id: userId, channel: "web", ...payload }),
      });
    } catch (err) {
      throw new ApiError(`network failure: ${String(err)}`);
    }
    if (!response.ok) {
      throw new ApiError(`server replied ${response.status}`, response.status);
    }
    const reply = (await response.json()) as { actions: WireAction[] };
    return reply.actions;
  }

  /** Server-side context for this user, or null when the user is unknown. */
  async fetchContext(userId: string): Promise<ContextSummary | null> {
    let response: Response;
    try {
      response = await this.fetchFn(
        `${this.baseUrl}/api/v1/context/${encodeURIComponent(userId)}`,
      );
    } catch {
      return null; // resume is best-effort; a fresh chat still works
    }
    if (!response.ok) {
      return null;
    }
    return (await response.json()) as ContextSummary;
  }
}
