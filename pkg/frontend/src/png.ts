// Browser-side PNG <-> label grid conversion. Labels ride the red channel,
// which the server reads back directly.

import { LABEL_COLORS } from "./gridmodel.js";

export async function pngBase64ToGrid(b64: string, height: number, width: number): Promise<Uint8Array> {
  const img = new Image();
  img.src = `data:image/png;base64,${b64}`;
  await img.decode();
  const canvas = document.createElement("canvas");
  canvas.width = width;
  canvas.height = height;
  const ctx = canvas.getContext("2d")!;
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(img, 0, 0);
  const data = ctx.getImageData(0, 0, width, height).data;
  const grid = new Uint8Array(height * width);
  for (let i = 0; i < grid.length; i++) {
    grid[i] = data[4 * i]; // red channel carries the label
  }
  return grid;
}

export function gridToPngBase64(grid: Uint8Array, height: number, width: number): string {
  const canvas = document.createElement("canvas");
  canvas.width = width;
  canvas.height = height;
  const ctx = canvas.getContext("2d")!;
  const image = ctx.createImageData(width, height);
  for (let i = 0; i < grid.length; i++) {
    image.data[4 * i] = grid[i];
    image.data[4 * i + 1] = grid[i];
    image.data[4 * i + 2] = grid[i];
    image.data[4 * i + 3] = 255;
  }
  ctx.putImageData(image, 0, 0);
  return canvas.toDataURL("image/png").split(",")[1];
}

/** Paint a zoomed, colorized view of the label grid onto a display canvas. */
export function drawGrid(canvas: HTMLCanvasElement, grid: Uint8Array, height: number,
                         width: number, zoom: number): void {
  canvas.width = width * zoom;
  canvas.height = height * zoom;
  const ctx = canvas.getContext("2d")!;
  for (let r = 0; r < height; r++) {
    for (let c = 0; c < width; c++) {
      const [red, green, blue] = LABEL_COLORS[grid[r * width + c]] ?? [255, 0, 255];
      ctx.fillStyle = `rgb(${red}, ${green}, ${blue})`;
      ctx.fillRect(c * zoom, r * zoom, zoom, zoom);
    }
  }
}
