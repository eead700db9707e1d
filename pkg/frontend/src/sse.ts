// Server-sent-events parsing over fetch streams. EventSource cannot abort a
// single request cleanly and does not exist under node, so the suggestion
// stream uses fetch + ReadableStream in both the browser and tests.

export interface SseEvent {
  event: string;
  data: string;
}

/** Incremental SSE frame parser; feed chunks, collect complete events. */
export class SseParser {
  private buffer = "";

  push(chunk: string): SseEvent[] {
    this.buffer += chunk;
    const events: SseEvent[] = [];
    let idx: number;
    while ((idx = this.buffer.indexOf("\n\n")) !== -1) {
      const frame = this.buffer.slice(0, idx);
      this.buffer = this.buffer.slice(idx + 2);
      let event = "message";
      const dataLines: string[] = [];
      for (const line of frame.split("\n")) {
        if (line.startsWith("event:")) {
          event = line.slice("event:".length).trim();
        } else if (line.startsWith("data:")) {
          dataLines.push(line.slice("data:".length).trimStart());
        }
      }
      if (dataLines.length > 0) {
        events.push({ event, data: dataLines.join("\n") });
      }
    }
    return events;
  }
}

export async function* parseSseResponse(
  body: ReadableStream<Uint8Array>,
): AsyncGenerator<SseEvent> {
  const reader = body.getReader();
  const decoder = new TextDecoder();
  const parser = new SseParser();
  try {
    for (;;) {
      const { value, done } = await reader.read();
      if (done) {
        break;
      }
      for (const event of parser.push(decoder.decode(value, { stream: true }))) {
        yield event;
      }
    }
  } finally {
    reader.releaseLock();
  }
}

export interface SuggestionDone {
  suggestion_id: string;
  token_count: number;
  elapsed_ms: number;
  tokens_per_sec: number;
}

export interface SuggestionHandlers {
  onToken(text: string, index: number): void;
  onDone?(info: SuggestionDone): void;
  onError?(error: { error: string; detail?: string }): void;
}

/** One suggestion stream; abort() cancels the suggestion server-side. */
export async function streamSuggestion(
  url: string,
  handlers: SuggestionHandlers,
  signal?: AbortSignal,
): Promise<void> {
  const resp = await fetch(url, { headers: { Accept: "text/event-stream" }, signal });
  if (!resp.ok || resp.body === null) {
    let detail = resp.statusText;
    let name = `HTTP ${resp.status}`;
    try {
      const body = (await resp.json()) as { error?: string; detail?: string };
      name = body.error ?? name;
      detail = body.detail ?? detail;
    } catch {
      // keep defaults
    }
    handlers.onError?.({ error: name, detail });
    return;
  }
  try {
    for await (const event of parseSseResponse(resp.body)) {
      if (event.event === "token") {
        const payload = JSON.parse(event.data) as { text: string; index: number };
        handlers.onToken(payload.text, payload.index);
      } else if (event.event === "done") {
        handlers.onDone?.(JSON.parse(event.data) as SuggestionDone);
      } else if (event.event === "error") {
        handlers.onError?.(JSON.parse(event.data) as { error: string; detail?: string });
      }
    }
  } catch (err) {
    if ((err as Error).name === "AbortError") {
      return; // deliberate client-side cancel
    }
    throw err;
  }
}
