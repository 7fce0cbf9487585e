/** DOM wiring: renders the conversation, settings panel, and stream controls. */

import { ApiError, fetchHealth, streamChatCompletion } from "./api.js";
import {
  DEFAULT_SETTINGS,
  Settings,
  loadSettings,
  saveSettings,
  validateSetting,
} from "./settings.js";
import {
  Conversation,
  appendDelta,
  beginRequest,
  cancelStream,
  clearError,
  commitAssistant,
  failStream,
  newConversation,
  wireMessages,
} from "./state.js";

const $ = <T extends HTMLElement>(id: string): T => {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el as T;
};

let conversation: Conversation = newConversation();
let settings: Settings = loadSettings(localStorage);
let controller: AbortController | null = null;

const transcript = $("transcript");
const input = $<HTMLTextAreaElement>("input");
const sendBtn = $<HTMLButtonElement>("send");
const cancelBtn = $<HTMLButtonElement>("cancel");
const errorBanner = $("error-banner");
const healthDot = $("health");

function render(): void {
  transcript.replaceChildren(
    ...conversation.messages.map((m) => {
      const div = document.createElement("div");
      div.className = `msg ${m.role}${m.interrupted ? " interrupted" : ""}`;
      div.textContent = m.content + (m.interrupted ? " ⏹" : "");
      return div;
    }),
  );
  if (conversation.state === "streaming") {
    const div = document.createElement("div");
    div.className = "msg assistant pending";
    div.textContent = conversation.pending || "…";
    transcript.appendChild(div);
  }
  transcript.scrollTop = transcript.scrollHeight;
  sendBtn.disabled = conversation.state === "streaming";
  cancelBtn.disabled = conversation.state !== "streaming";
  errorBanner.textContent = conversation.error ?? "";
  errorBanner.hidden = conversation.error === null;
}

async function send(): Promise<void> {
  const next = beginRequest(conversation, input.value);
  if (!next) return;
  conversation = next;
  input.value = "";
  render();
  controller = new AbortController();
  try {
    await streamChatCompletion(
      wireMessages(conversation, settings.system_prompt),
      settings,
      {
        onDelta(text) {
          conversation = appendDelta(conversation, text);
          render();
        },
        onDone() {
          conversation = commitAssistant(conversation);
          render();
        },
      },
      controller.signal,
    );
  } catch (err) {
    if (controller.signal.aborted) {
      conversation = cancelStream(conversation);
    } else {
      const message = err instanceof ApiError ? err.message : String(err);
      conversation = failStream(conversation, message);
    }
    render();
  } finally {
    controller = null;
  }
}

function cancel(): void {
  controller?.abort();
}

function bindSetting(id: string, key: keyof Settings): void {
  const el = $<HTMLInputElement | HTMLTextAreaElement>(id);
  const error = $(`${id}-error`);
  el.value = String(settings[key]);
  el.addEventListener("change", () => {
    const problem = validateSetting(key, el.value);
    error.textContent = problem ?? "";
    if (problem) return;
    const numeric = key !== "system_prompt" && key !== "server_origin";
    (settings as unknown as Record<string, unknown>)[key] = numeric ? Number(el.value) : el.value;
    saveSettings(localStorage, settings);
    if (key === "server_origin") void pollHealth();
  });
}

async function pollHealth(): Promise<void> {
  const up = await fetchHealth(settings.server_origin);
  healthDot.className = up ? "up" : "down";
  healthDot.title = up ? "server ready" : "server unreachable";
}

sendBtn.addEventListener("click", () => void send());
cancelBtn.addEventListener("click", cancel);
input.addEventListener("keydown", (e) => {
  if (e.key === "Enter" && !e.shiftKey) {
    e.preventDefault();
    void send();
  }
});
$("reset").addEventListener("click", () => {
  conversation = newConversation();
  render();
});
$("dismiss-error").addEventListener("click", () => {
  conversation = clearError(conversation);
  render();
});
$("restore-defaults").addEventListener("click", () => {
  settings = { ...DEFAULT_SETTINGS };
  saveSettings(localStorage, settings);
  for (const [id, key] of SETTING_IDS) {
    $<HTMLInputElement>(id).value = String(settings[key]);
  }
});

const SETTING_IDS: [string, keyof Settings][] = [
  ["set-temperature", "temperature"],
  ["set-top-k", "top_k"],
  ["set-top-p", "top_p"],
  ["set-max-tokens", "max_tokens"],
  ["set-system", "system_prompt"],
  ["set-origin", "server_origin"],
];
for (const [id, key] of SETTING_IDS) {
  bindSetting(id, key);
}

render();
void pollHealth();
setInterval(() => void pollHealth(), 10_000);
