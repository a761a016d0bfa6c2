// DOM wiring for the sketch console. All drawing state lives in
// CanvasState and all service traffic in QueryClient; this file only
// translates events and renders.

import { QueryClient, QueryResponse, ServiceError } from "./api.js";
import { CanvasState, EXPORT_SIZE, Stroke, Tool, scaleStroke } from "./state.js";

const SERVICE_URL = (window as unknown as { SKETCHRET_URL?: string }).SKETCHRET_URL ?? "";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function drawStrokes(ctx: CanvasRenderingContext2D, strokes: readonly Stroke[], size: number): void {
  ctx.fillStyle = "#ffffff";
  ctx.fillRect(0, 0, size, size);
  ctx.lineCap = "round";
  ctx.lineJoin = "round";
  for (const s of strokes) {
    ctx.strokeStyle = s.tool === "eraser" ? "#ffffff" : "#000000";
    ctx.lineWidth = s.width;
    ctx.beginPath();
    const [first, ...rest] = s.points;
    ctx.moveTo(first.x, first.y);
    if (rest.length === 0) ctx.lineTo(first.x + 0.1, first.y + 0.1); // dot
    for (const p of rest) ctx.lineTo(p.x, p.y);
    ctx.stroke();
  }
}

/** Render to a fixed 224x224 offscreen canvas and encode as PNG bytes. */
async function exportSketch(state: CanvasState, displaySize: number): Promise<Uint8Array> {
  const off = document.createElement("canvas");
  off.width = EXPORT_SIZE;
  off.height = EXPORT_SIZE;
  const ctx = off.getContext("2d");
  if (!ctx) throw new Error("2d context unavailable");
  drawStrokes(ctx, state.list().map((s) => scaleStroke(s, displaySize)), EXPORT_SIZE);
  const blob: Blob = await new Promise((resolve, reject) =>
    off.toBlob((b) => (b ? resolve(b) : reject(new Error("PNG encode failed"))), "image/png"),
  );
  return new Uint8Array(await blob.arrayBuffer());
}

function main(): void {
  const canvas = el<HTMLCanvasElement>("pad");
  const ctx = canvas.getContext("2d")!;
  const banner = el<HTMLDivElement>("banner");
  const grid = el<HTMLDivElement>("results");
  const latency = el<HTMLSpanElement>("latency");
  const kInput = el<HTMLInputElement>("k");
  const rerankInput = el<HTMLInputElement>("rerank");

  const state = new CanvasState();
  const client = new QueryClient(SERVICE_URL);
  let tool: Tool = "pen";
  let active: Stroke | null = null;

  const repaint = () => drawStrokes(ctx, state.list().concat(active ? [active] : []), canvas.width);
  repaint();

  const showBanner = (msg: string) => {
    banner.textContent = msg;
    banner.hidden = msg === "";
  };

  canvas.addEventListener("pointerdown", (ev) => {
    canvas.setPointerCapture(ev.pointerId);
    active = {
      tool,
      width: tool === "eraser" ? 18 : 4,
      points: [{ x: ev.offsetX, y: ev.offsetY }],
    };
    repaint();
  });
  canvas.addEventListener("pointermove", (ev) => {
    if (!active) return;
    active.points.push({ x: ev.offsetX, y: ev.offsetY });
    repaint();
  });
  const finish = () => {
    if (active) {
      state.add(active);
      active = null;
      repaint();
    }
  };
  canvas.addEventListener("pointerup", finish);
  canvas.addEventListener("pointercancel", finish);

  el<HTMLButtonElement>("tool-pen").addEventListener("click", () => (tool = "pen"));
  el<HTMLButtonElement>("tool-eraser").addEventListener("click", () => (tool = "eraser"));
  el<HTMLButtonElement>("undo").addEventListener("click", () => {
    state.undo();
    repaint();
  });
  el<HTMLButtonElement>("clear").addEventListener("click", () => {
    state.clear();
    repaint();
  });

  const renderResults = (body: QueryResponse) => {
    grid.replaceChildren(
      ...body.results.map((tile) => {
        const card = document.createElement("figure");
        card.className = "tile";
        const img = document.createElement("img");
        img.src = client.thumbnailUrl(tile);
        img.alt = tile.id;
        const caption = document.createElement("figcaption");
        caption.textContent = `${tile.label} · ${tile.distance.toFixed(3)}`;
        const badge = document.createElement("span");
        badge.className = `badge ${tile.mode}`;
        badge.textContent = tile.mode;
        caption.appendChild(badge);
        card.append(img, caption);
        return card;
      }),
    );
    latency.textContent = `${body.latency_ms.toFixed(1)} ms`;
  };

  el<HTMLButtonElement>("submit").addEventListener("click", async () => {
    if (state.isEmpty()) {
      showBanner("Draw something first — empty sketches are not submitted.");
      return;
    }
    showBanner("");
    try {
      const png = await exportSketch(state, canvas.width);
      const body = await client.query(png, Number(kInput.value) || 10, rerankInput.checked);
      renderResults(body); // previous results stay up until this point
    } catch (err) {
      if (err instanceof ServiceError && err.message.includes("superseded")) return;
      showBanner(err instanceof Error ? err.message : String(err));
    }
  });
}

window.addEventListener("DOMContentLoaded", main);
