// Browser wiring: evidence panel, ghost-text editor, slice viewer.

import { ApiClient, type AnalyzeResponse } from "./api.js";
import { SuggestionEditor } from "./editor.js";
import { SliceViewer, drawSlice } from "./viewer.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (node === null) {
    throw new Error(`missing element #${id}`);
  }
  return node as T;
}

function renderEvidence(panel: HTMLElement, analysis: AnalyzeResponse): void {
  const rows: string[] = [];
  for (const [name, f] of Object.entries(analysis.features)) {
    rows.push(`<tr><td>${name}</td><td>${f.volume_cm3.toFixed(1)} cm3</td>` +
      `<td>${f.intensity_mean.toFixed(1)} HU</td></tr>`);
  }
  const ratio = analysis.ratio ? analysis.ratio.ratio.toFixed(2) : "-";
  panel.innerHTML =
    `<table><tr><th>organ</th><th>volume</th><th>mean</th></tr>${rows.join("")}</table>` +
    `<p>volume ratio: <strong>${ratio}</strong></p>`;
}

async function boot(): Promise<void> {
  const params = new URLSearchParams(window.location.search);
  const base = params.get("api") ?? "http://127.0.0.1:8008";
  const studyId = params.get("study");
  const organ = params.get("organ") ?? "kidney";
  if (studyId === null) {
    el<HTMLDivElement>("status").textContent =
      "Pass ?study=<id> (and optionally &api=<url>) to open an analyzed study.";
    return;
  }
  const api = new ApiClient(base);
  const status = el<HTMLDivElement>("status");

  let analysis: AnalyzeResponse;
  try {
    analysis = await api.analyze(studyId, [organ]);
  } catch (err) {
    status.textContent = `study not analyzed: ${(err as Error).message}`;
    return;
  }
  renderEvidence(el<HTMLDivElement>("evidence"), analysis);

  const session = await api.createSession(studyId, organ);
  const acceptedEl = el<HTMLSpanElement>("accepted");
  const ghostEl = el<HTMLSpanElement>("ghost");
  const debounceInput = el<HTMLInputElement>("debounce");

  const editor = new SuggestionEditor(api, session.session_id, "", {
    debounceMs: Number(debounceInput.value) || 400,
    onChange: (state) => {
      acceptedEl.textContent = state.acceptedText;
      ghostEl.textContent = state.ghostText;
      status.textContent = state.streaming ? "streaming…" : "idle";
    },
    onError: (error) => {
      status.textContent = `error: ${error.error}`;
    },
  });

  let typingTimer: ReturnType<typeof setTimeout> | null = null;
  document.addEventListener("keydown", (ev) => {
    if (ev.key === "Tab") {
      ev.preventDefault();
      void (ev.shiftKey ? editor.shiftTabAccept() : editor.tabAccept());
    } else if (ev.key === "Escape") {
      void editor.escape();
    } else if (ev.key.length === 1 || ev.key === "Backspace") {
      const text =
        ev.key === "Backspace"
          ? editor.state.acceptedText.slice(0, -1)
          : editor.state.acceptedText + ev.key;
      editor.type(text);
      if (typingTimer !== null) {
        clearTimeout(typingTimer);
      }
      typingTimer = setTimeout(() => void editor.requestSuggestion(), editor.debounceMs);
    }
  });
  el<HTMLButtonElement>("suggest").addEventListener("click", () => {
    void editor.requestSuggestion();
  });

  const viewer = new SliceViewer(api, studyId, "z", Number(el<HTMLInputElement>("opacity").value));
  const canvas = el<HTMLCanvasElement>("slice");
  const slider = el<HTMLInputElement>("slice-index");
  const redraw = async () => {
    viewer.opacity = Number(el<HTMLInputElement>("opacity").value);
    drawSlice(canvas, await viewer.load(Number(slider.value)));
  };
  slider.addEventListener("input", () => void redraw());
  el<HTMLInputElement>("opacity").addEventListener("input", () => void redraw());
  await redraw();
}

void boot();
