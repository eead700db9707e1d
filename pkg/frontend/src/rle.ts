// Run-length label rasters, matching the service definition exactly
// (fixtures/rle_cases.json is asserted on both sides).

export type RlePair = [number, number];

export function expandRle(runs: RlePair[]): number[] {
  const out: number[] = [];
  for (const [label, count] of runs) {
    for (let i = 0; i < count; i++) {
      out.push(label);
    }
  }
  return out;
}

export function encodeRle(labels: number[]): RlePair[] {
  const runs: RlePair[] = [];
  for (const value of labels) {
    const last = runs[runs.length - 1];
    if (last !== undefined && last[0] === value) {
      last[1] += 1;
    } else {
      runs.push([value, 1]);
    }
  }
  return runs;
}

/** kidney_left / kidney right / KIDNEY -> kidney */
export function canonicalOrgan(name: string): string {
  let base = name.trim().toLowerCase().replace(/_/g, " ");
  for (const suffix of [" left", " right"]) {
    if (base.endsWith(suffix)) {
      base = base.slice(0, -suffix.length);
    }
  }
  return base;
}

export interface ColorizeInput {
  width: number;
  height: number;
  labels: RlePair[];
  palette: Record<string, [number, number, number]>;
  label_table: Record<string, string>;
}

/**
 * Expand and colorize a slice into an RGBA buffer (row-major, width fastest).
 * Background stays fully transparent; labeled voxels get the palette color of
 * their canonical organ at the requested overlay opacity.
 */
export function colorizeSlice(
  slice: ColorizeInput,
  opacity = 0.6,
): Uint8ClampedArray<ArrayBuffer> {
  const labels = expandRle(slice.labels);
  if (labels.length !== slice.width * slice.height) {
    throw new Error(
      `RLE expanded to ${labels.length} labels, expected ${slice.width * slice.height}`,
    );
  }
  const alpha = Math.round(Math.min(Math.max(opacity, 0), 1) * 255);
  const rgba = new Uint8ClampedArray(new ArrayBuffer(labels.length * 4));
  for (let i = 0; i < labels.length; i++) {
    const label = labels[i];
    if (label === 0) {
      continue; // transparent background
    }
    const organ = slice.label_table[String(label)];
    const color = organ !== undefined ? slice.palette[canonicalOrgan(organ)] : undefined;
    const [r, g, b] = color ?? [255, 0, 255]; // loud fallback for unmapped labels
    const o = i * 4;
    rgba[o] = r;
    rgba[o + 1] = g;
    rgba[o + 2] = b;
    rgba[o + 3] = alpha;
  }
  return rgba;
}
