/**
 * Generation settings: defaults mirroring the server's table, client-side
 * validation against the same bounds, and persistence behind a tiny
 * key-value interface (localStorage in the browser, a Map in tests).
 */

export const DEFAULT_SYSTEM_PROMPT =
  "You are an AI assistant that follows instruction extremely well. Help as much as you can.";

export interface Settings {
  temperature: number;
  top_k: number;
  top_p: number;
  max_tokens: number;
  system_prompt: string;
  server_origin: string;
}

export const DEFAULT_SETTINGS: Settings = {
  temperature: 0.8,
  top_k: 40,
  top_p: 0.95,
  max_tokens: 16,
  system_prompt: DEFAULT_SYSTEM_PROMPT,
  server_origin: "http://127.0.0.1:8080",
};

export interface KeyValueStore {
  getItem(key: string): string | null;
  setItem(key: string, value: string): void;
}

const STORAGE_KEY = "pocketlm.settings";

/** Returns an error message, or null when the value is acceptable. */
export function validateSetting(key: keyof Settings, value: unknown): string | null {
  switch (key) {
    case "temperature": {
      const v = Number(value);
      if (!Number.isFinite(v) || v < 0) return "temperature must be >= 0";
      return null;
    }
    case "top_k": {
      const v = Number(value);
      if (!Number.isInteger(v) || v < 0) return "top_k must be 0 (off) or a positive integer";
      return null;
    }
    case "top_p": {
      const v = Number(value);
      if (!Number.isFinite(v) || v <= 0 || v > 1) return "top_p must be in (0, 1]";
      return null;
    }
    case "max_tokens": {
      const v = Number(value);
      if (!Number.isInteger(v) || v < 0) return "max_tokens must be a non-negative integer";
      return null;
    }
    case "system_prompt":
      return typeof value === "string" ? null : "system prompt must be text";
    case "server_origin": {
      if (typeof value !== "string" || !/^https?:\/\//.test(value)) {
        return "server origin must be an http(s) URL";
      }
      return null;
    }
  }
}

export function loadSettings(store: KeyValueStore): Settings {
  const raw = store.getItem(STORAGE_KEY);
  if (!raw) return { ...DEFAULT_SETTINGS };
  let parsed: unknown;
  try {
    parsed = JSON.parse(raw);
  } catch {
    return { ...DEFAULT_SETTINGS };
  }
  const merged = { ...DEFAULT_SETTINGS, ...(parsed as Partial<Settings>) };
  // drop stored values that no longer validate
  for (const key of Object.keys(DEFAULT_SETTINGS) as (keyof Settings)[]) {
    if (validateSetting(key, merged[key]) !== null) {
      (merged as Record<string, unknown>)[key] = DEFAULT_SETTINGS[key];
    }
  }
  return merged;
}

export function saveSettings(store: KeyValueStore, settings: Settings): void {
  store.setItem(STORAGE_KEY, JSON.stringify(settings));
}
