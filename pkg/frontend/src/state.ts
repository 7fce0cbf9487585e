/**
 * Conversation state machine. Pure transitions over an immutable value so
 * every UI behavior is testable without a DOM:
 *
 *   idle --send--> streaming --[DONE]--> idle (assistant committed)
 *                  streaming --cancel--> idle (partial commit, interrupted)
 *                  streaming --error--> error (rolled back to pre-send)
 *
 * At most one response streams at a time; deltas only append while
 * streaming.
 */

export type Role = "system" | "user" | "assistant";

export interface UiMessage {
  role: Role;
  content: string;
  interrupted?: boolean;
}

export type GenerationState = "idle" | "streaming" | "error";

export interface Conversation {
  messages: UiMessage[];
  pending: string;
  state: GenerationState;
  error: string | null;
}

export function newConversation(): Conversation {
  return { messages: [], pending: "", state: "idle", error: null };
}

/** Appends the user turn and enters streaming; null when not allowed. */
export function beginRequest(c: Conversation, userText: string): Conversation | null {
  if (c.state === "streaming") return null;
  const text = userText.trim();
  if (!text) return null;
  return {
    messages: [...c.messages, { role: "user", content: userText }],
    pending: "",
    state: "streaming",
    error: null,
  };
}

export function appendDelta(c: Conversation, delta: string): Conversation {
  if (c.state !== "streaming") return c;
  return { ...c, pending: c.pending + delta };
}

/** Terminal [DONE]: the buffered text becomes the assistant message. */
export function commitAssistant(c: Conversation): Conversation {
  if (c.state !== "streaming") return c;
  return {
    messages: [...c.messages, { role: "assistant", content: c.pending }],
    pending: "",
    state: "idle",
    error: null,
  };
}

/** User interjection: commit the partial text, marked interrupted. */
export function cancelStream(c: Conversation): Conversation {
  if (c.state !== "streaming") return c;
  return {
    messages: [...c.messages, { role: "assistant", content: c.pending, interrupted: true }],
    pending: "",
    state: "idle",
    error: null,
  };
}

/** Request failure: roll back the unanswered user turn, surface the error. */
export function failStream(c: Conversation, message: string): Conversation {
  if (c.state !== "streaming") return c;
  const messages = [...c.messages];
  if (messages.length && messages[messages.length - 1]?.role === "user") {
    messages.pop();
  }
  return { messages, pending: "", state: "error", error: message };
}

export function clearError(c: Conversation): Conversation {
  if (c.state !== "error") return c;
  return { ...c, state: "idle", error: null };
}

/** The wire history for the next request, including any system prompt. */
export function wireMessages(c: Conversation, systemPrompt: string): { role: Role; content: string }[] {
  const out: { role: Role; content: string }[] = [];
  if (systemPrompt.trim()) {
    out.push({ role: "system", content: systemPrompt });
  }
  for (const m of c.messages) {
    out.push({ role: m.role, content: m.content });
  }
  return out;
}
