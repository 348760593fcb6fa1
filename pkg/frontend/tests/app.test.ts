import { beforeEach, describe, expect, it } from "vitest";
import { wireApp, type App } from "../src/app.js";
import type { QueryResponse, UploadResponse } from "../src/types.js";

const uploadBody: UploadResponse = {
  image_id: "img_" + "a".repeat(32),
  h: 64,
  w: 64,
  patch_grid: [8, 8],
};

function queryBody(kind: string): QueryResponse {
  return {
    matches: [
      { text: "first", score: 0.9, confidence: 0.8 },
      { text: "second", score: 0.1, confidence: 0.2 },
    ],
    heatmap: { h: 8, w: 8, values: Array(64).fill(0.5) },
    prompt: { kind, points: [[0.25, 0.5]] } as QueryResponse["prompt"],
  };
}

interface Call {
  url: string;
  body?: unknown;
}

function makeApp(
  responder?: (url: string, init?: RequestInit) => Response,
): { app: App; calls: Call[] } {
  const calls: Call[] = [];
  document.body.innerHTML = '<div id="app"></div>';
  const app = wireApp(document.getElementById("app")!, {
    baseUrl: "http://svc",
    stageSize: { width: 512, height: 512 },
    fetchFn: async (url, init) => {
      calls.push({
        url,
        body:
          typeof init?.body === "string" ? JSON.parse(init.body) : init?.body,
      });
      if (responder) return responder(url, init);
      if (url.endsWith("/v1/images")) {
        return jsonResponse(201, uploadBody);
      }
      return jsonResponse(200, queryBody("points"));
    },
  });
  (app.elements.candidates as HTMLTextAreaElement).value = "alpha\nbeta";
  return { app, calls };
}

function jsonResponse(status: number, body: unknown): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "content-type": "application/json" },
  });
}

describe("wireApp", () => {
  beforeEach(() => {
    document.body.innerHTML = "";
  });

  it("upload fits the letterbox and binds the draft", async () => {
    const { app } = makeApp();
    await app.uploadImage(new Uint8Array([1]));
    expect(app.state.fit?.drawWidth).toBe(512);
    expect(app.draft.imageId).toBe(uploadBody.image_id);
    expect((app.elements.photo as HTMLImageElement).style.display).toBe("block");
  });

  it("a point click queries and renders all three panels", async () => {
    const { app, calls } = makeApp();
    await app.uploadImage(new Uint8Array([1]));
    app.clickStage(128, 256);
    await app.flush();

    const query = calls.find((c) => c.url.endsWith("/v1/query"));
    expect(query?.body).toMatchObject({
      image_id: uploadBody.image_id,
      prompt: { kind: "points", points: [[0.25, 0.5]] },
      candidates: ["alpha", "beta"],
    });
    expect(app.elements.matches.querySelectorAll("li")).toHaveLength(2);
    expect(app.elements.heatmap.querySelectorAll(".heat-cell")).toHaveLength(64);
    expect(app.elements.history.querySelectorAll("tbody tr")).toHaveLength(1);
  });

  it("clicks on the letterbox bars are ignored", async () => {
    const { app, calls } = makeApp();
    await app.uploadImage(new Uint8Array([1]));
    const before = calls.length;
    app.clickStage(-20, 600);
    await app.flush();
    expect(calls.length).toBe(before);
    expect(app.draft.points).toHaveLength(0);
  });

  it("undo and clear never call the server", async () => {
    const { app, calls } = makeApp();
    await app.uploadImage(new Uint8Array([1]));
    app.clickStage(128, 256);
    await app.flush();
    const before = calls.length;
    app.undo();
    app.clearMarks();
    await app.flush();
    expect(calls.length).toBe(before);
    expect(app.history.length).toBe(1); // history untouched by clear
  });

  it("422 shows an inline hint, other errors a toast", async () => {
    let mode: "bad_prompt" | "boom" = "bad_prompt";
    const { app } = makeApp((url) => {
      if (url.endsWith("/v1/images")) return jsonResponse(201, uploadBody);
      if (mode === "bad_prompt") {
        return jsonResponse(422, {
          detail: { code: "bad_prompt", message: "points must be normalized" },
        });
      }
      return jsonResponse(500, {
        detail: { code: "internal", message: "server fell over" },
      });
    });
    await app.uploadImage(new Uint8Array([1]));

    app.clickStage(128, 256);
    await app.flush();
    expect(app.elements.hint.textContent).toContain("normalized");
    expect(app.elements.toast.classList.contains("show")).toBe(false);

    mode = "boom";
    app.clickStage(128, 300);
    await app.flush();
    expect(app.elements.toast.textContent).toBe("500: server fell over");
    expect(app.elements.toast.classList.contains("show")).toBe(true);
  });

  it("opacity changes re-render the overlay without a new query", async () => {
    const { app, calls } = makeApp();
    await app.uploadImage(new Uint8Array([1]));
    app.clickStage(128, 256);
    await app.flush();
    const before = calls.length;
    app.setOpacity(1.0);
    const cell = app.elements.heatmap.querySelector(".heat-cell") as HTMLElement;
    expect(cell.style.background).toContain("0.5"); // alpha = 1.0 * value 0.5
    expect(calls.length).toBe(before);
  });

  it("requires candidates or a class set before querying", async () => {
    const { app, calls } = makeApp();
    await app.uploadImage(new Uint8Array([1]));
    (app.elements.candidates as HTMLTextAreaElement).value = "";
    app.clickStage(128, 256);
    await app.flush();
    expect(calls.filter((c) => c.url.endsWith("/v1/query"))).toHaveLength(0);
    expect(app.elements.hint.textContent).toContain("candidate");
  });

  it("class set field is used when the textarea is empty", async () => {
    const { app, calls } = makeApp();
    await app.uploadImage(new Uint8Array([1]));
    (app.elements.candidates as HTMLTextAreaElement).value = "";
    (app.elements.classSet as HTMLInputElement).value = "shapes";
    app.clickStage(128, 256);
    await app.flush();
    const query = calls.find((c) => c.url.endsWith("/v1/query"));
    expect(query?.body).toMatchObject({ class_set: "shapes" });
    expect((query?.body as any).candidates).toBeUndefined();
  });

  it("re-upload starts a new session entry and clears marks", async () => {
    const { app } = makeApp();
    await app.uploadImage(new Uint8Array([1]));
    app.clickStage(128, 256);
    await app.flush();
    await app.uploadImage(new Uint8Array([2]));
    expect(app.state.session).toBe(2);
    expect(app.draft.points).toHaveLength(0);
    expect(app.history.length).toBe(1); // history survives across sessions
  });
});
