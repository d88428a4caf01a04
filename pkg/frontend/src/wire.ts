/** Wire schema spoken with the chat service. */

export interface WireChoice {
  choice_id: string;
  label: string;
}

export interface WireAction {
  kind: "send_text" | "send_choices" | "typing_on" | "request_media" | "store_claim";
  text?: string;
  choices?: WireChoice[];
}

export interface WireReply {
  actions: WireAction[];
}

export type OutgoingPayload =
  | { text: string }
  | { choice_id: string }
  | { media_uri: string };
