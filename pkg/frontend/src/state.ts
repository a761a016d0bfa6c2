// Drawing state kept free of DOM types so it can be tested headlessly.
// The canvas element is only a view; every mutation goes through here.

export interface Point {
  x: number;
  y: number;
}

export type Tool = "pen" | "eraser";

export interface Stroke {
  points: Point[];
  width: number;
  tool: Tool;
}

export const EXPORT_SIZE = 224;

export class CanvasState {
  private strokes: Stroke[] = [];
  private undoStack: Stroke[][] = [];
  readonly size: number;

  constructor(size: number = EXPORT_SIZE) {
    this.size = size;
  }

  /** Strokes in draw order; callers must not mutate the result. */
  list(): readonly Stroke[] {
    return this.strokes;
  }

  isEmpty(): boolean {
    // an eraser-only drawing is still a blank page
    return !this.strokes.some((s) => s.tool === "pen" && s.points.length > 0);
  }

  private snapshot(): void {
    this.undoStack.push(this.strokes.map((s) => ({ ...s, points: [...s.points] })));
  }

  add(stroke: Stroke): void {
    if (stroke.points.length === 0) return;
    this.snapshot();
    this.strokes.push({ ...stroke, points: [...stroke.points] });
  }

  undo(): boolean {
    const prior = this.undoStack.pop();
    if (prior === undefined) return false;
    this.strokes = prior;
    return true;
  }

  clear(): void {
    if (this.strokes.length === 0) return;
    this.snapshot();
    this.strokes = [];
  }
}

/**
 * Map display-space stroke coordinates onto the fixed export grid so the
 * PNG geometry matches training no matter how large the on-screen canvas is.
 */
export function scaleStroke(stroke: Stroke, displaySize: number, exportSize: number = EXPORT_SIZE): Stroke {
  const f = exportSize / displaySize;
  return {
    tool: stroke.tool,
    width: stroke.width * f,
    points: stroke.points.map((p) => ({ x: p.x * f, y: p.y * f })),
  };
}
