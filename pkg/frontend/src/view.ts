import type { ChatController } from "./controller.js";

/**
 * Plain-DOM renderer for the chat: transcript bubbles, quick-reply
 * buttons, typing indicator, error banner with retry, and the input row.
 * Re-renders the transcript wholesale on every controller change; at the
 * scale of one conversation that is simpler than partial updates.
 */
export class ChatView {
  private readonly transcript: HTMLElement;
  private readonly input: HTMLInputElement;
  private readonly sendButton: HTMLButtonElement;
  private readonly banner: HTMLElement;

  constructor(
    private readonly root: HTMLElement,
    private readonly controller: ChatController,
  ) {
    root.innerHTML = `
      <div class="chat">
        <div class="banner" hidden></div>
        <div class="transcript" aria-live="polite"></div>
        <form class="input-row">
          <input type="text" name="message" autocomplete="off"
                 placeholder="Describe what happened..." aria-label="Message" />
          <button type="submit">Send</button>
        </form>
      </div>`;
    this.transcript = root.querySelector(".transcript")!;
    this.input = root.querySelector("input")!;
    this.sendButton = root.querySelector("button[type=submit]")!;
    this.banner = root.querySelector(".banner")!;

    root.querySelector("form")!.addEventListener("submit", (event) => {
      event.preventDefault();
      const text = this.input.value;
      this.input.value = "";
      void this.controller.sendText(text);
    });
    controller.onChange(() => this.render());
    this.render();
  }

  render(): void {
    const c = this.controller;
    this.transcript.innerHTML = "";
    c.messages.forEach((message, index) => {
      const bubble = document.createElement("div");
      bubble.className = `bubble ${message.direction}`;
      if (message.pending) {
        bubble.classList.add("pending");
      }
      if (message.failed) {
        bubble.classList.add("failed");
      }
      if (message.text) {
        const text = document.createElement("p");
        text.textContent = message.text;
        bubble.appendChild(text);
      }
      if (message.choices) {
        const row = document.createElement("div");
        row.className = "choices";
        const enabled = c.choicesEnabled(index);
        for (const choice of message.choices) {
          const button = document.createElement("button");
          button.type = "button";
          button.textContent = choice.label;
          button.dataset.choiceId = choice.choice_id;
          button.disabled = !enabled;
          button.addEventListener("click", () => {
            void c.sendChoice(choice.choice_id, choice.label);
          });
          row.appendChild(button);
        }
        bubble.appendChild(row);
      }
      this.transcript.appendChild(bubble);
    });

    if (c.typingVisible) {
      const indicator = document.createElement("div");
      indicator.className = "typing-indicator";
      indicator.textContent = "...";
      this.transcript.appendChild(indicator);
    }

    if (c.errorMessage) {
      this.banner.hidden = false;
      this.banner.innerHTML = "";
      const label = document.createElement("span");
      label.textContent = `Could not send: ${c.errorMessage}`;
      const retry = document.createElement("button");
      retry.type = "button";
      retry.className = "retry";
      retry.textContent = "Retry";
      retry.addEventListener("click", () => void c.retry());
      this.banner.append(label, retry);
      if (c.retryText && !this.input.value) {
        this.input.value = c.retryText; // typed input is never lost
      }
    } else {
      this.banner.hidden = true;
    }

    this.sendButton.disabled = c.busy;
    this.transcript.scrollTop = this.transcript.scrollHeight;
  }
}
