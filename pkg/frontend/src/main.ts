// Studio app: pick a pose, describe shapes, edit the parsing with the label
// palette, describe textures, generate, iterate. One in-flight generation at
// a time; earlier results stay in a comparison strip.

import { StudioClient, ApiError, PoseEntry } from "./api.js";
import {
  CanvasDocument,
  LABEL_COLORS,
  LABEL_NAMES,
  createDocument,
  exportGrid,
  paint,
  setBrush,
  undo,
} from "./gridmodel.js";
import { drawGrid, gridToPngBase64, pngBase64ToGrid } from "./png.js";

const HEIGHT = 64;
const WIDTH = 32;
const ZOOM = 8;

const client = new StudioClient("");

interface AppState {
  doc: CanvasDocument;
  sessionId: string | null;
  poseId: string | null;
  generating: boolean;
}

const state: AppState = {
  doc: createDocument(HEIGHT, WIDTH),
  sessionId: null,
  poseId: null,
  generating: false,
};

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function showError(message: string): void {
  const box = el<HTMLDivElement>("error-box");
  box.textContent = message;
  box.style.display = message ? "block" : "none";
}

function redraw(): void {
  drawGrid(el<HTMLCanvasElement>("parsing-canvas"), state.doc.grid, HEIGHT, WIDTH, ZOOM);
}

function buildPalette(): void {
  const bar = el<HTMLDivElement>("palette");
  LABEL_NAMES.forEach((name, label) => {
    const button = document.createElement("button");
    const [r, g, b] = LABEL_COLORS[label];
    button.textContent = name;
    button.style.borderLeft = `14px solid rgb(${r}, ${g}, ${b})`;
    button.onclick = () => {
      state.doc = setBrush(state.doc, label, state.doc.brushRadius);
      document.querySelectorAll("#palette button").forEach((n) => n.classList.remove("active"));
      button.classList.add("active");
    };
    if (label === state.doc.brushLabel) button.classList.add("active");
    bar.appendChild(button);
  });
  const radius = el<HTMLInputElement>("brush-radius");
  radius.oninput = () => {
    state.doc = setBrush(state.doc, state.doc.brushLabel, parseInt(radius.value, 10));
  };
}

function canvasPoint(event: PointerEvent): { row: number; col: number } {
  const canvas = el<HTMLCanvasElement>("parsing-canvas");
  const rect = canvas.getBoundingClientRect();
  return {
    row: ((event.clientY - rect.top) / rect.height) * HEIGHT,
    col: ((event.clientX - rect.left) / rect.width) * WIDTH,
  };
}

function wirePainting(): void {
  const canvas = el<HTMLCanvasElement>("parsing-canvas");
  let stroke: { row: number; col: number }[] | null = null;
  canvas.addEventListener("pointerdown", (event) => {
    stroke = [canvasPoint(event)];
  });
  canvas.addEventListener("pointermove", (event) => {
    if (!stroke) return;
    stroke.push(canvasPoint(event));
    // live preview: paint incrementally but fold into one undo entry on release
    const preview = paint(state.doc, stroke, state.doc.brushLabel, state.doc.brushRadius);
    drawGrid(canvas, preview.grid, HEIGHT, WIDTH, ZOOM);
  });
  const finish = () => {
    if (!stroke) return;
    state.doc = paint(state.doc, stroke, state.doc.brushLabel, state.doc.brushRadius);
    stroke = null;
    redraw();
  };
  canvas.addEventListener("pointerup", finish);
  canvas.addEventListener("pointerleave", finish);
  el<HTMLButtonElement>("undo-button").onclick = () => {
    state.doc = undo(state.doc);
    redraw();
  };
}

async function loadPoses(): Promise<void> {
  const strip = el<HTMLDivElement>("pose-strip");
  let poses: PoseEntry[];
  try {
    poses = await client.listPoses();
  } catch (err) {
    showError(`could not list poses: ${err}`);
    return;
  }
  poses.forEach((pose) => {
    const img = document.createElement("img");
    img.src = `data:image/png;base64,${pose.thumbnail_png_base64}`;
    img.title = pose.id;
    img.width = WIDTH * 3;
    img.onclick = () => {
      document.querySelectorAll("#pose-strip img").forEach((n) => n.classList.remove("active"));
      img.classList.add("active");
      state.poseId = pose.id;
    };
    strip.appendChild(img);
  });
}

async function requestParsing(): Promise<void> {
  showError("");
  if (!state.poseId) {
    showError("pick a pose first");
    return;
  }
  const shapeText = el<HTMLInputElement>("shape-text").value;
  const seed = parseInt(el<HTMLInputElement>("seed").value, 10) || 0;
  try {
    const response = await client.requestParsing({
      poseId: state.poseId,
      shapeText,
      seed,
    });
    state.sessionId = response.session_id;
    const grid = await pngBase64ToGrid(response.parsing_png_base64, HEIGHT, WIDTH);
    state.doc = createDocument(HEIGHT, WIDTH, grid);
    redraw();
    el<HTMLDivElement>("attrs-box").textContent = JSON.stringify(response.attributes);
  } catch (err) {
    showError(err instanceof ApiError ? `server: ${err.message}` : String(err));
  }
}

async function submitGenerate(): Promise<void> {
  showError("");
  if (state.generating) return;
  const textureText = el<HTMLInputElement>("texture-text").value;
  if (!textureText.trim()) {
    showError("texture text is required");
    return;
  }
  const seed = parseInt(el<HTMLInputElement>("seed").value, 10) || 0;
  const button = el<HTMLButtonElement>("generate-button");
  state.generating = true;
  button.disabled = true;
  try {
    const response = await client.requestImage({
      sessionId: state.sessionId ?? undefined,
      parsingPngBase64: gridToPngBase64(exportGrid(state.doc), HEIGHT, WIDTH),
      textureText,
      seed,
    });
    const panel = document.createElement("figure");
    const img = document.createElement("img");
    img.src = `data:image/png;base64,${response.image_png_base64}`;
    img.width = WIDTH * 6;
    const caption = document.createElement("figcaption");
    caption.textContent = `seed ${seed} — ${textureText}`;
    panel.appendChild(img);
    panel.appendChild(caption);
    el<HTMLDivElement>("results").prepend(panel); // older panels stay for comparison
  } catch (err) {
    showError(err instanceof ApiError ? `server: ${err.message}` : String(err));
  } finally {
    state.generating = false;
    button.disabled = false;
  }
}

export function start(): void {
  buildPalette();
  wirePainting();
  void loadPoses();
  el<HTMLButtonElement>("parsing-button").onclick = () => void requestParsing();
  el<HTMLButtonElement>("generate-button").onclick = () => void submitGenerate();
  redraw();
}

if (typeof document !== "undefined" && document.getElementById("parsing-canvas")) {
  start();
}
