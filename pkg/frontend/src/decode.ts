/** Pipeline-version-1 augmentation decoder: expands a record's 4-byte seed
 * into the full parameter bundle, draw for draw as documented in FORMAT.md.
 * Stages disabled by the spec consume no draws. */

import { DrawStream } from "./pcg.js";

export interface PipelineSpec {
  imageSize: number;
  cropScale: [number, number];
  cropRatio: [number, number];
  hflipProb: number;
  jitter: [number, number, number];
  eraseProb: number;
  eraseScale: [number, number];
  eraseRatio: [number, number];
  eraseFill: "zero" | "noise";
  randaugCount: number;
  randaugMagnitude: number;
  mixMode: "mixup" | "cutmix" | null;
  mixAlpha: number;
}

export const DEFAULT_SPEC: PipelineSpec = {
  imageSize: 32,
  cropScale: [0.3, 1.0],
  cropRatio: [0.75, 4.0 / 3.0],
  hflipProb: 0.5,
  jitter: [0.4, 0.4, 0.4],
  eraseProb: 0.25,
  eraseScale: [0.02, 0.33],
  eraseRatio: [0.3, 10.0 / 3.0],
  eraseFill: "zero",
  randaugCount: 2,
  randaugMagnitude: 9,
  mixMode: null,
  mixAlpha: 1.0,
};

export interface EraseBox {
  x: number;
  y: number;
  w: number;
  h: number;
  fill: [number, number, number] | null;
}

export interface MixParams {
  mode: "mixup" | "cutmix";
  lam: number;
  cutBox: [number, number, number, number] | null;
}

export interface AugParams {
  crop: [number, number, number, number];
  hflip: boolean;
  colorJitter: [number, number, number];
  erase: EraseBox | null;
  randaugOps: Array<[number, number]>;
  mix: MixParams | null;
}

const RANDAUG_OP_COUNT = 14;

function iround(x: number): number {
  return Math.floor(x + 0.5);
}

function clamp(v: number, lo: number, hi: number): number {
  return Math.min(Math.max(v, lo), hi);
}

function beta(s: DrawStream, alpha: number): number {
  if (alpha <= 0) throw new RangeError("mix alpha must be positive");
  const inv = 1.0 / alpha;
  for (;;) {
    const u = s.uniform(0, 1);
    const v = s.uniform(0, 1);
    const x = Math.pow(u, inv);
    const y = Math.pow(v, inv);
    if (x + y <= 1.0) {
      if (x + y === 0.0) return 0.5;
      return x / (x + y);
    }
  }
}

export function decode(d0: number, spec: PipelineSpec,
                       sourceHw: [number, number]): AugParams {
  const [srcH, srcW] = sourceHw;
  const s = new DrawStream(BigInt(d0 >>> 0));

  const sc = s.uniform(spec.cropScale[0], spec.cropScale[1]);
  const ratio = s.uniform(spec.cropRatio[0], spec.cropRatio[1]);
  const area = sc * srcH * srcW;
  const cw = clamp(iround(Math.sqrt(area * ratio)), 1, srcW);
  const ch = clamp(iround(Math.sqrt(area / ratio)), 1, srcH);
  const cx = s.choice(srcW - cw + 1);
  const cy = s.choice(srcH - ch + 1);

  let flip = false;
  if (spec.hflipProb > 0) {
    flip = s.uniform(0, 1) < spec.hflipProb;
  }

  let fb = 1.0;
  let fc = 1.0;
  let fs = 1.0;
  if (spec.jitter[0] > 0) fb = s.uniform(Math.max(0, 1 - spec.jitter[0]), 1 + spec.jitter[0]);
  if (spec.jitter[1] > 0) fc = s.uniform(Math.max(0, 1 - spec.jitter[1]), 1 + spec.jitter[1]);
  if (spec.jitter[2] > 0) fs = s.uniform(Math.max(0, 1 - spec.jitter[2]), 1 + spec.jitter[2]);

  let erase: EraseBox | null = null;
  if (spec.eraseProb > 0) {
    const u = s.uniform(0, 1);
    if (u < spec.eraseProb) {
      const r = spec.imageSize;
      const frac = s.uniform(spec.eraseScale[0], spec.eraseScale[1]);
      const er = s.uniform(spec.eraseRatio[0], spec.eraseRatio[1]);
      const earea = frac * r * r;
      const ew = clamp(iround(Math.sqrt(earea * er)), 1, r);
      const eh = clamp(iround(Math.sqrt(earea / er)), 1, r);
      const ex = s.choice(r - ew + 1);
      const ey = s.choice(r - eh + 1);
      let fill: [number, number, number] | null = null;
      if (spec.eraseFill === "noise") {
        fill = [s.uniform(0, 1), s.uniform(0, 1), s.uniform(0, 1)];
      }
      erase = { x: ex, y: ey, w: ew, h: eh, fill };
    }
  }

  const ops: Array<[number, number]> = [];
  for (let i = 0; i < spec.randaugCount; i++) {
    const op = s.choice(RANDAUG_OP_COUNT);
    const mag = s.choice(spec.randaugMagnitude + 1);
    ops.push([op, mag]);
  }

  let mix: MixParams | null = null;
  if (spec.mixMode !== null) {
    const lamRaw = beta(s, spec.mixAlpha);
    if (spec.mixMode === "mixup") {
      mix = { mode: "mixup", lam: lamRaw, cutBox: null };
    } else {
      const r = spec.imageSize;
      const cut = Math.sqrt(1.0 - lamRaw);
      const bw = Math.min(iround(r * cut), r);
      const bh = Math.min(iround(r * cut), r);
      const bx = s.choice(r - bw + 1);
      const by = s.choice(r - bh + 1);
      const lamAdj = 1.0 - (bw * bh) / (r * r);
      mix = { mode: "cutmix", lam: lamAdj, cutBox: [bx, by, bw, bh] };
    }
  }

  return {
    crop: [cx, cy, cw, ch],
    hflip: flip,
    colorJitter: [fb, fc, fs],
    erase,
    randaugOps: ops,
    mix,
  };
}
