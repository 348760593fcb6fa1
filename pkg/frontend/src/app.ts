import { ApiClient, ApiError } from "./api.js";
import { letterbox, toNormalized, toStage, type Letterbox } from "./coords.js";
import { PromptDraft, type Tool } from "./draft.js";
import { renderHeatmap } from "./heatmap.js";
import { SessionHistory } from "./history.js";
import { LatestWins } from "./queue.js";
import type { QueryResponse, UploadResponse } from "./types.js";

export interface AppOptions {
  baseUrl?: string;
  fetchFn?: (input: string, init?: RequestInit) => Promise<Response>;
  /** Interaction surface size in CSS pixels; defaults to 512x512. */
  stageSize?: { width: number; height: number };
  defaultK?: number;
}

export interface AppState {
  upload: UploadResponse | null;
  lastResult: QueryResponse | null;
  fit: Letterbox | null;
  opacity: number;
  session: number;
}

export interface App {
  root: HTMLElement;
  api: ApiClient;
  draft: PromptDraft;
  history: SessionHistory;
  queue: LatestWins;
  state: AppState;
  elements: Record<string, HTMLElement>;
  uploadImage(png: ArrayBuffer | Uint8Array): Promise<UploadResponse>;
  /** Pointer-down/up in stage pixels; same path the DOM listeners use. */
  pointerDown(px: number, py: number): void;
  pointerUp(px: number, py: number): void;
  clickStage(px: number, py: number): void;
  setTool(tool: Tool): void;
  undo(): void;
  clearMarks(): void;
  setOpacity(value: number): void;
  submitQuery(): void;
  /** Resolve once no query is running or queued. */
  flush(): Promise<void>;
}

const SVG_NS = "http://www.w3.org/2000/svg";

export function wireApp(root: HTMLElement, opts: AppOptions = {}): App {
  const doc = root.ownerDocument;
  const api = new ApiClient(
    opts.baseUrl ?? "http://127.0.0.1:8080",
    opts.fetchFn,
  );
  const draft = new PromptDraft();
  const history = new SessionHistory();
  const queue = new LatestWins();
  const stageSize = opts.stageSize ?? { width: 512, height: 512 };
  const state: AppState = {
    upload: null,
    lastResult: null,
    fit: null,
    opacity: 0.6,
    session: 0,
  };
  const work: Promise<void>[] = [];

  root.innerHTML = `
    <div class="toolbar">
      <input id="file" type="file" accept="image/png">
      <button id="tool-point" class="tool active">point</button>
      <button id="tool-box" class="tool">box</button>
      <button id="tool-none" class="tool">no prompt</button>
      <button id="undo">undo</button>
      <button id="clear">clear</button>
      <label>k <input id="k" type="number" min="1" value="${opts.defaultK ?? 3}"></label>
      <label>heatmap <input id="opacity" type="range" min="0" max="100" value="60"></label>
    </div>
    <div class="workspace">
      <div id="stage" style="position:relative;width:${stageSize.width}px;height:${stageSize.height}px">
        <img id="photo" alt="" draggable="false" style="position:absolute;display:none">
        <div id="heatmap" style="position:absolute;pointer-events:none"></div>
        <svg id="overlay" style="position:absolute;inset:0;pointer-events:none"
             width="${stageSize.width}" height="${stageSize.height}"></svg>
      </div>
      <div class="side">
        <label>candidate captions (one per line)
          <textarea id="candidates" rows="6"></textarea>
        </label>
        <label>or class set <input id="class-set" type="text"></label>
        <div id="hint" class="hint"></div>
        <ol id="matches"></ol>
      </div>
    </div>
    <h3>history</h3>
    <table id="history"><thead><tr>
      <th>#</th><th>prompt</th><th>top-1</th><th>confidence</th>
    </tr></thead><tbody></tbody></table>
    <div id="toast" class="toast"></div>
  `;

  const el = (id: string): HTMLElement => {
    const found = root.querySelector<HTMLElement>(`#${id}`);
    if (!found) throw new Error(`missing element #${id}`);
    return found;
  };
  const elements: Record<string, HTMLElement> = {
    file: el("file"),
    stage: el("stage"),
    photo: el("photo"),
    heatmap: el("heatmap"),
    overlay: el("overlay"),
    matches: el("matches"),
    history: el("history"),
    toast: el("toast"),
    hint: el("hint"),
    candidates: el("candidates"),
    classSet: el("class-set"),
    k: el("k"),
    opacity: el("opacity"),
  };

  function toast(message: string): void {
    elements.toast.textContent = message;
    elements.toast.classList.add("show");
  }

  function hint(message: string): void {
    elements.hint.textContent = message;
  }

  function applyFit(): void {
    if (!state.upload) return;
    const fit = letterbox(stageSize, {
      width: state.upload.w,
      height: state.upload.h,
    });
    state.fit = fit;
    const photo = elements.photo as HTMLImageElement;
    photo.style.left = `${fit.offsetX}px`;
    photo.style.top = `${fit.offsetY}px`;
    photo.style.width = `${fit.drawWidth}px`;
    photo.style.height = `${fit.drawHeight}px`;
    photo.style.display = "block";
    const heat = elements.heatmap;
    heat.style.left = `${fit.offsetX}px`;
    heat.style.top = `${fit.offsetY}px`;
    heat.style.width = `${fit.drawWidth}px`;
    heat.style.height = `${fit.drawHeight}px`;
  }

  function renderMarks(): void {
    const svg = elements.overlay;
    svg.textContent = "";
    const fit = state.fit;
    if (!fit) return;
    for (const [x, y] of draft.points) {
      const { px, py } = toStage(x, y, fit);
      const dot = doc.createElementNS(SVG_NS, "circle");
      dot.setAttribute("cx", px.toFixed(1));
      dot.setAttribute("cy", py.toFixed(1));
      dot.setAttribute("r", "5");
      dot.setAttribute("class", "point-mark");
      svg.appendChild(dot);
    }
    if (draft.box) {
      const [x0, y0, x1, y1] = draft.box;
      const a = toStage(x0, y0, fit);
      const b = toStage(x1, y1, fit);
      const rect = doc.createElementNS(SVG_NS, "rect");
      rect.setAttribute("x", a.px.toFixed(1));
      rect.setAttribute("y", a.py.toFixed(1));
      rect.setAttribute("width", (b.px - a.px).toFixed(1));
      rect.setAttribute("height", (b.py - a.py).toFixed(1));
      rect.setAttribute("class", "box-mark");
      svg.appendChild(rect);
    }
  }

  function renderMatches(result: QueryResponse): void {
    const list = elements.matches;
    list.textContent = "";
    for (const m of result.matches) {
      const li = doc.createElement("li");
      li.textContent = `${m.text} — ${(m.confidence * 100).toFixed(1)}%`;
      li.dataset.score = String(m.score);
      li.dataset.confidence = String(m.confidence);
      list.appendChild(li);
    }
  }

  function renderHistoryRow(): void {
    const body = elements.history.querySelector("tbody")!;
    body.textContent = "";
    for (const entry of history.list()) {
      const tr = doc.createElement("tr");
      const summary =
        entry.prompt.kind === "points"
          ? `points (${entry.prompt.points?.length ?? 0})`
          : entry.prompt.kind.replace(/_/g, " ");
      tr.innerHTML = `<td>${entry.seq}</td><td>${summary}</td>` +
        `<td>${entry.top1 ? escapeHtml(entry.top1.text) : "—"}</td>` +
        `<td>${entry.top1 ? (entry.top1.confidence * 100).toFixed(1) + "%" : "—"}</td>`;
      tr.dataset.prompt = JSON.stringify(entry.prompt);
      body.appendChild(tr);
    }
  }

  function candidateFields(): {
    candidates?: string[];
    class_set?: string;
  } {
    const lines = (elements.candidates as HTMLTextAreaElement).value
      .split("\n")
      .map((line) => line.trim())
      .filter((line) => line.length > 0);
    if (lines.length > 0) return { candidates: lines };
    const classSet = (elements.classSet as HTMLInputElement).value.trim();
    if (classSet) return { class_set: classSet };
    return {};
  }

  function submitQuery(): void {
    if (!draft.canSubmit()) {
      hint("register an image first");
      return;
    }
    const selection = candidateFields();
    if (!selection.candidates && !selection.class_set) {
      hint("add candidate captions or a class set");
      return;
    }
    hint("");
    const req = {
      image_id: draft.imageId!,
      prompt: draft.toPrompt(),
      k: Number((elements.k as HTMLInputElement).value) || 1,
      ...selection,
    };
    work.push(
      queue.submit(async () => {
        try {
          const result = await api.query(req);
          state.lastResult = result;
          renderMatches(result);
          renderHeatmap(elements.heatmap, result.heatmap, state.opacity);
          history.append({
            at: new Date().toISOString(),
            imageId: req.image_id,
            prompt: result.prompt,
            candidates: selection.candidates,
            classSet: selection.class_set,
            k: req.k,
            top1: result.matches[0] ?? null,
            matches: result.matches,
          });
          renderHistoryRow();
        } catch (err) {
          if (err instanceof ApiError && err.status === 422) {
            hint(err.message);
          } else if (err instanceof ApiError) {
            toast(`${err.status}: ${err.message}`);
          } else {
            toast(String(err));
          }
        }
      }),
    );
  }

  async function uploadImage(
    png: ArrayBuffer | Uint8Array,
  ): Promise<UploadResponse> {
    const meta = await api.registerImage(png);
    state.upload = meta;
    state.session += 1;
    state.lastResult = null;
    draft.setImage(meta.image_id);
    applyFit();
    renderMarks();
    elements.heatmap.textContent = "";
    elements.matches.textContent = "";
    const photo = elements.photo as HTMLImageElement;
    if (typeof URL !== "undefined" && "createObjectURL" in URL) {
      // jsdom has no object URLs; the stage still tracks geometry without one
      try {
        photo.src = URL.createObjectURL(
          new Blob([png instanceof Uint8Array ? new Uint8Array(png) : png], {
            type: "image/png",
          }),
        );
      } catch {
        /* ignore: display-only */
      }
    }
    return meta;
  }

  function stagePoint(event: MouseEvent): { px: number; py: number } {
    const rect = elements.stage.getBoundingClientRect();
    return { px: event.clientX - rect.left, py: event.clientY - rect.top };
  }

  function clickStage(px: number, py: number): void {
    if (draft.tool !== "point" || !state.fit) return;
    const pos = toNormalized(px, py, state.fit);
    if (!pos) return; // letterbox bars are dead space
    draft.addPoint(pos.x, pos.y);
    renderMarks();
    submitQuery();
  }

  function pointerDown(px: number, py: number): void {
    if (draft.tool !== "box" || !state.fit) return;
    const pos = toNormalized(px, py, state.fit);
    if (!pos) return;
    draft.beginBox(pos.x, pos.y);
  }

  function pointerUp(px: number, py: number): void {
    if (draft.tool !== "box" || !state.fit) return;
    const pos = toNormalized(px, py, state.fit);
    if (!pos) return;
    if (draft.endBox(pos.x, pos.y)) {
      renderMarks();
      submitQuery();
    }
  }

  function setTool(tool: Tool): void {
    draft.setTool(tool);
    for (const button of root.querySelectorAll(".tool")) {
      button.classList.remove("active");
    }
    const active = root.querySelector(`#tool-${tool === "none" ? "none" : tool}`);
    active?.classList.add("active");
    if (tool === "none") submitQuery();
  }

  function undo(): void {
    draft.undo();
    renderMarks();
  }

  function clearMarks(): void {
    draft.clear();
    setTool("point");
    renderMarks();
  }

  function setOpacity(value: number): void {
    state.opacity = Math.min(1, Math.max(0, value));
    if (state.lastResult) {
      renderHeatmap(elements.heatmap, state.lastResult.heatmap, state.opacity);
    }
  }

  async function flush(): Promise<void> {
    while (work.length > 0) {
      await Promise.all(work.splice(0));
    }
  }

  // -- DOM listeners ---------------------------------------------------------
  elements.file.addEventListener("change", () => {
    const input = elements.file as HTMLInputElement;
    const file = input.files?.[0];
    if (!file) return;
    work.push(
      file
        .arrayBuffer()
        .then((buf) => uploadImage(buf))
        .then(() => undefined)
        .catch((err) => {
          if (err instanceof ApiError) toast(`${err.status}: ${err.message}`);
          else toast(String(err));
        }),
    );
  });
  elements.stage.addEventListener("click", (event) => {
    const { px, py } = stagePoint(event as MouseEvent);
    clickStage(px, py);
  });
  elements.stage.addEventListener("mousedown", (event) => {
    const { px, py } = stagePoint(event as MouseEvent);
    pointerDown(px, py);
  });
  elements.stage.addEventListener("mouseup", (event) => {
    const { px, py } = stagePoint(event as MouseEvent);
    pointerUp(px, py);
  });
  el("tool-point").addEventListener("click", () => setTool("point"));
  el("tool-box").addEventListener("click", () => setTool("box"));
  el("tool-none").addEventListener("click", () => setTool("none"));
  el("undo").addEventListener("click", undo);
  el("clear").addEventListener("click", clearMarks);
  elements.opacity.addEventListener("input", () => {
    setOpacity(Number((elements.opacity as HTMLInputElement).value) / 100);
  });

  return {
    root,
    api,
    draft,
    history,
    queue,
    state,
    elements,
    uploadImage,
    pointerDown,
    pointerUp,
    clickStage,
    setTool,
    undo,
    clearMarks,
    setOpacity,
    submitQuery,
    flush,
  };
}

function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;");
}
