// Typed client for the completion service HTTP API. The wire formats here
// mirror the server exactly; nothing else talks to the network.

export interface OrganFeatures {
  organ: string;
  label_id: number;
  voxel_count: number;
  volume_cm3: number;
  surface_area_mm2: number;
  sphericity: number;
  bbox_mm: [number, number, number];
  intensity_mean: number;
  intensity_std: number;
  intensity_min: number;
  intensity_max: number;
  intensity_entropy: number;
}

export interface LateralityRatio {
  left_volume_cm3: number;
  right_volume_cm3: number;
  ratio: number;
}

export interface AnalyzeResponse {
  features: Record<string, OrganFeatures>;
  ratio: LateralityRatio | null;
}

export interface SliceResponse {
  axis: string;
  index: number;
  width: number;
  height: number;
  labels: [number, number][];
  palette: Record<string, [number, number, number]>;
  label_table: Record<string, string>;
}

export interface SessionInfo {
  session_id: string;
  feature_payload: string;
}

export interface ReportInfo {
  accepted_text: string;
  event_count: number;
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly errorName: string,
    detail: string,
  ) {
    super(`${errorName}: ${detail}`);
  }
}

async function jsonOrThrow<T>(resp: Response): Promise<T> {
  if (!resp.ok) {
    let name = `HTTP ${resp.status}`;
    let detail = resp.statusText;
    try {
      const body = (await resp.json()) as { error?: string; detail?: string };
      name = body.error ?? name;
      detail = body.detail ?? detail;
    } catch {
      // non-JSON error body; keep the status text
    }
    throw new ApiError(resp.status, name, detail);
  }
  return (await resp.json()) as T;
}

export class ApiClient {
  constructor(readonly baseUrl: string) {}

  private url(path: string): string {
    return this.baseUrl.replace(/\/$/, "") + path;
  }

  async createStudy(form: FormData): Promise<{ study_id: string; route: string }> {
    return jsonOrThrow(await fetch(this.url("/studies"), { method: "POST", body: form }));
  }

  async analyze(studyId: string, organs: string[]): Promise<AnalyzeResponse> {
    return jsonOrThrow(
      await fetch(this.url(`/studies/${studyId}/analyze`), {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify({ organs }),
      }),
    );
  }

  async slice(studyId: string, axis: string, index: number): Promise<SliceResponse> {
    return jsonOrThrow(await fetch(this.url(`/studies/${studyId}/slices/${axis}/${index}`)));
  }

  async createSession(studyId: string, organ: string, prefix?: string): Promise<SessionInfo> {
    return jsonOrThrow(
      await fetch(this.url("/sessions"), {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify({ study_id: studyId, organ, ...(prefix ? { prefix } : {}) }),
      }),
    );
  }

  async accept(sessionId: string, mode: "full" | "first_word"): Promise<{ accepted_text: string }> {
    return jsonOrThrow(
      await fetch(this.url(`/sessions/${sessionId}/accept`), {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify({ mode }),
      }),
    );
  }

  async reject(sessionId: string): Promise<{ accepted_text: string }> {
    return jsonOrThrow(
      await fetch(this.url(`/sessions/${sessionId}/reject`), { method: "POST" }),
    );
  }

  async edit(sessionId: string, text: string): Promise<{ accepted_text: string }> {
    return jsonOrThrow(
      await fetch(this.url(`/sessions/${sessionId}/edit`), {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify({ text }),
      }),
    );
  }

  async report(sessionId: string): Promise<ReportInfo> {
    return jsonOrThrow(await fetch(this.url(`/sessions/${sessionId}/report`)));
  }

  suggestionUrl(sessionId: string, maxTokens?: number): string {
    const query = maxTokens ? `?max_tokens=${maxTokens}` : "";
    return this.url(`/sessions/${sessionId}/suggestion${query}`);
  }
}
