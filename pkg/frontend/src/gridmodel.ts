// Pure label-grid model behind the parsing palette. Every transition returns
// a new document, so the editor logic is testable without a browser.

export const LABEL_COUNT = 6;
export const UNDO_LIMIT = 32;

export const LABEL_NAMES = ["background", "head", "skin", "upper garment", "lower garment", "shoes"] as const;

export const LABEL_COLORS: ReadonlyArray<readonly [number, number, number]> = [
  [240, 240, 245], // background
  [250, 220, 130], // head
  [230, 180, 150], // skin
  [200, 80, 80],   // upper garment
  [80, 110, 200],  // lower garment
  [60, 60, 70],    // shoes
];

export interface Point {
  row: number;
  col: number;
}

export interface CanvasDocument {
  readonly height: number;
  readonly width: number;
  readonly grid: Uint8Array; // row-major labels
  readonly undoStack: ReadonlyArray<Uint8Array>;
  readonly brushLabel: number;
  readonly brushRadius: number;
}

export function createDocument(height: number, width: number, init?: Uint8Array): CanvasDocument {
  const grid = new Uint8Array(height * width);
  if (init) {
    if (init.length !== grid.length) {
      throw new Error(`grid size mismatch: got ${init.length}, want ${grid.length}`);
    }
    grid.set(init);
  }
  return { height, width, grid, undoStack: [], brushLabel: 3, brushRadius: 1 };
}

export function isValidLabel(label: number): boolean {
  return Number.isInteger(label) && label >= 0 && label < LABEL_COUNT;
}

export function setBrush(doc: CanvasDocument, label: number, radius: number): CanvasDocument {
  if (!isValidLabel(label) || radius < 0) {
    return doc;
  }
  return { ...doc, brushLabel: label, brushRadius: Math.floor(radius) };
}

/** Set every cell within `radius` of any stroke point; one undo snapshot per stroke. */
export function paint(doc: CanvasDocument, stroke: Point[], label: number, radius: number): CanvasDocument {
  if (!isValidLabel(label) || stroke.length === 0) {
    return doc;
  }
  const grid = new Uint8Array(doc.grid);
  let changed = false;
  const r = Math.max(0, Math.floor(radius));
  for (const p of stroke) {
    const cr = Math.floor(p.row);
    const cc = Math.floor(p.col);
    for (let dr = -r; dr <= r; dr++) {
      for (let dc = -r; dc <= r; dc++) {
        if (dr * dr + dc * dc > r * r) continue;
        const row = cr + dr;
        const col = cc + dc;
        if (row < 0 || row >= doc.height || col < 0 || col >= doc.width) continue;
        const at = row * doc.width + col;
        if (grid[at] !== label) {
          grid[at] = label;
          changed = true;
        }
      }
    }
  }
  if (!changed) {
    return doc;
  }
  const undoStack = [...doc.undoStack, new Uint8Array(doc.grid)];
  while (undoStack.length > UNDO_LIMIT) {
    undoStack.shift();
  }
  return { ...doc, grid, undoStack };
}

export function undo(doc: CanvasDocument): CanvasDocument {
  if (doc.undoStack.length === 0) {
    return doc;
  }
  const undoStack = doc.undoStack.slice(0, -1);
  const grid = new Uint8Array(doc.undoStack[doc.undoStack.length - 1]);
  return { ...doc, grid, undoStack };
}

export function exportGrid(doc: CanvasDocument): Uint8Array {
  return new Uint8Array(doc.grid);
}

/** Load a grid (e.g. the server's echo); editing history restarts. */
export function importGrid(doc: CanvasDocument, grid: Uint8Array): CanvasDocument {
  if (grid.length !== doc.height * doc.width) {
    throw new Error(`grid size mismatch: got ${grid.length}, want ${doc.height * doc.width}`);
  }
  if (grid.some((v) => v >= LABEL_COUNT)) {
    throw new Error("grid contains invalid labels");
  }
  return { ...doc, grid: new Uint8Array(grid), undoStack: [] };
}

export function gridsEqual(a: Uint8Array, b: Uint8Array): boolean {
  return a.length === b.length && a.every((v, i) => v === b[i]);
}
