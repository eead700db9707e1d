// Slice viewer logic: fetch an RLE slice, clamp the scrub index, colorize.

import type { ApiClient, SliceResponse } from "./api.js";
import { colorizeSlice } from "./rle.js";

export function clampIndex(index: number, extent: number): number {
  if (extent < 1) {
    return 0;
  }
  return Math.min(Math.max(Math.trunc(index), 0), extent - 1);
}

export interface LoadedSlice {
  slice: SliceResponse;
  rgba: Uint8ClampedArray<ArrayBuffer>;
}

export class SliceViewer {
  opacity: number;
  private extent: number | null = null;

  constructor(
    private readonly api: ApiClient,
    readonly studyId: string,
    readonly axis: string = "z",
    opacity = 0.6,
  ) {
    this.opacity = opacity;
  }

  /** Fetch and colorize one plane; scrubbing beyond the extent clamps. */
  async load(index: number): Promise<LoadedSlice> {
    let wanted = this.extent === null ? Math.max(Math.trunc(index), 0) : clampIndex(index, this.extent);
    let slice: SliceResponse;
    try {
      slice = await this.api.slice(this.studyId, this.axis, wanted);
    } catch (err) {
      // the extent along the axis is only known server-side; on the first
      // out-of-range probe, snap back to plane 0 and remember nothing
      if (this.extent === null && wanted > 0) {
        wanted = 0;
        slice = await this.api.slice(this.studyId, this.axis, wanted);
      } else {
        throw err;
      }
    }
    return { slice, rgba: colorizeSlice(slice, this.opacity) };
  }

  setExtent(extent: number): void {
    this.extent = extent;
  }
}

/** Paint a loaded slice onto a canvas (browser only). */
export function drawSlice(canvas: HTMLCanvasElement, loaded: LoadedSlice, scale = 8): void {
  const { slice, rgba } = loaded;
  canvas.width = slice.width * scale;
  canvas.height = slice.height * scale;
  const ctx = canvas.getContext("2d");
  if (ctx === null) {
    return;
  }
  const image = new ImageData(rgba, slice.width, slice.height);
  void createImageBitmap(image).then((bitmap) => {
    ctx.imageSmoothingEnabled = false;
    ctx.clearRect(0, 0, canvas.width, canvas.height);
    ctx.drawImage(bitmap, 0, 0, canvas.width, canvas.height);
  });
}
