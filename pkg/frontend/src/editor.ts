// Editor state machine: accepted text plus a dimmed ghost-text suffix, the
// familiar inline-completion idiom. All server actions are sequenced per
// session and at most one SSE connection exists at any time.

import type { ApiClient } from "./api.js";
import { streamSuggestion, type SuggestionDone, type SuggestionHandlers } from "./sse.js";

export interface EditorState {
  acceptedText: string;
  ghostText: string;
  streaming: boolean;
  sessionId: string;
}

export type StreamOpener = (
  url: string,
  handlers: SuggestionHandlers,
  signal: AbortSignal,
) => Promise<void>;

export interface EditorOptions {
  /** typing-pause debounce before a suggestion is requested / an edit is pushed */
  debounceMs?: number;
  maxTokens?: number;
  openStream?: StreamOpener;
  onChange?: (state: EditorState) => void;
  onError?: (error: { error: string; detail?: string }) => void;
}

export class SuggestionEditor {
  readonly state: EditorState;
  readonly debounceMs: number;
  private readonly maxTokens?: number;
  private readonly openStream: StreamOpener;
  private readonly onChange: (state: EditorState) => void;
  private readonly onError: (error: { error: string; detail?: string }) => void;
  private abortController: AbortController | null = null;
  private debounceTimer: ReturnType<typeof setTimeout> | null = null;
  private pendingEdit = false;
  private queue: Promise<unknown> = Promise.resolve();

  constructor(
    private readonly api: ApiClient,
    sessionId: string,
    initialText = "",
    options: EditorOptions = {},
  ) {
    this.state = {
      acceptedText: initialText,
      ghostText: "",
      streaming: false,
      sessionId,
    };
    this.debounceMs = options.debounceMs ?? 400;
    this.maxTokens = options.maxTokens;
    this.openStream = options.openStream ?? streamSuggestion;
    this.onChange = options.onChange ?? (() => {});
    this.onError = options.onError ?? (() => {});
  }

  /** serialize server actions: no overlapping POSTs for one session */
  private enqueue<T>(action: () => Promise<T>): Promise<T> {
    const next = this.queue.then(action);
    this.queue = next.catch(() => {});
    return next;
  }

  private emit(): void {
    this.onChange({ ...this.state });
  }

  get hasGhost(): boolean {
    return this.state.ghostText.length > 0;
  }

  /** Open the SSE stream and grow the ghost text token by token. */
  requestSuggestion(): Promise<SuggestionDone | null> {
    if (this.state.streaming) {
      return Promise.resolve(null); // at most one stream per session
    }
    this.state.ghostText = "";
    this.state.streaming = true;
    this.emit();
    this.abortController = new AbortController();
    const signal = this.abortController.signal;
    let doneInfo: SuggestionDone | null = null;
    return this.openStream(
      this.api.suggestionUrl(this.state.sessionId, this.maxTokens),
      {
        onToken: (text) => {
          this.state.ghostText += text;
          this.emit();
        },
        onDone: (info) => {
          doneInfo = info;
        },
        onError: (error) => {
          this.state.ghostText = "";
          this.onError(error);
        },
      },
      signal,
    )
      .catch((err: Error) => {
        this.state.ghostText = "";
        this.onError({ error: err.name, detail: err.message });
      })
      .then(() => {
        this.state.streaming = false;
        this.abortController = null;
        this.emit();
        return doneInfo;
      });
  }

  /** Abort the SSE connection; the server cancels the in-flight suggestion. */
  cancelStream(): void {
    if (this.abortController !== null) {
      this.abortController.abort();
      this.abortController = null;
    }
    this.state.streaming = false;
    this.state.ghostText = "";
    this.emit();
  }

  /** Tab: move the whole ghost into the accepted text (server round-trip). */
  async tabAccept(): Promise<void> {
    if (!this.hasGhost || this.state.streaming) {
      return;
    }
    const { accepted_text } = await this.enqueue(() =>
      this.api.accept(this.state.sessionId, "full"),
    );
    this.state.acceptedText = accepted_text;
    this.state.ghostText = "";
    this.emit();
  }

  /** Shift+Tab: accept only the first word; the remainder stays as ghost. */
  async shiftTabAccept(): Promise<void> {
    if (!this.hasGhost || this.state.streaming) {
      return;
    }
    const ghost = this.state.ghostText.trim();
    const firstWord = ghost.split(/\s+/)[0] ?? "";
    const { accepted_text } = await this.enqueue(() =>
      this.api.accept(this.state.sessionId, "first_word"),
    );
    this.state.acceptedText = accepted_text;
    this.state.ghostText = ghost.slice(firstWord.length).trimStart();
    this.emit();
  }

  /** Esc: discard the suggestion. */
  async escape(): Promise<void> {
    if (this.state.streaming) {
      this.cancelStream();
      return;
    }
    if (!this.hasGhost) {
      return;
    }
    await this.enqueue(() => this.api.reject(this.state.sessionId));
    this.state.ghostText = "";
    this.emit();
  }

  /** Free typing: local edit now, POST on the typing pause. Typing along the
   * ghost consumes it; divergent typing aborts any stream and drops it. */
  type(newText: string): void {
    if (this.state.streaming) {
      this.cancelStream();
    } else if (this.hasGhost) {
      const old = this.state.acceptedText;
      const typed = newText.startsWith(old) ? newText.slice(old.length) : null;
      this.state.ghostText =
        typed !== null && this.state.ghostText.startsWith(typed)
          ? this.state.ghostText.slice(typed.length)
          : "";
    }
    this.state.acceptedText = newText;
    this.pendingEdit = true;
    this.emit();
    if (this.debounceTimer !== null) {
      clearTimeout(this.debounceTimer);
    }
    this.debounceTimer = setTimeout(() => void this.flushEdit(), this.debounceMs);
  }

  /** Push a pending local edit to the server immediately. */
  async flushEdit(): Promise<void> {
    if (this.debounceTimer !== null) {
      clearTimeout(this.debounceTimer);
      this.debounceTimer = null;
    }
    if (!this.pendingEdit) {
      return;
    }
    this.pendingEdit = false;
    const { accepted_text } = await this.enqueue(() =>
      this.api.edit(this.state.sessionId, this.state.acceptedText),
    );
    this.state.acceptedText = accepted_text;
    this.emit();
  }

  /** Dev-build consistency check: local text must equal the server's. */
  async verifyConsistency(): Promise<boolean> {
    const report = await this.api.report(this.state.sessionId);
    return report.accepted_text === this.state.acceptedText;
  }
}
