/** Epoch cache reader: validates the FORMAT.md layout (magic, versions,
 * CRC-32 header checksum, CRC-64 whole-file trailer) and exposes records,
 * densified soft labels and decoded augmentation parameters. */

import { readFileSync } from "node:fs";

import { crc32, crc64 } from "./crc.js";
import { AugParams, PipelineSpec, decode } from "./decode.js";

export class CacheCorruptError extends Error {
  constructor() {
    super("cache corrupt");
    this.name = "CacheCorruptError";
  }
}

export class UnsupportedVersionError extends Error {
  constructor() {
    super("unsupported version");
    this.name = "UnsupportedVersionError";
  }
}

export class SampleRangeError extends RangeError {
  constructor() {
    super("sample out of range");
    this.name = "SampleRangeError";
  }
}

export type ValuePrecision = "half" | "single";

export interface EpochHeader {
  formatVersion: number;
  pipelineVersion: number;
  epoch: number;
  runSeed: bigint;
  numSamples: number;
  numClasses: number;
  k: number;
  valuePrecision: ValuePrecision;
  shuffleSeed: bigint;
  recordSize: number;
}

export interface CacheRecord {
  d0: number;
  indices: Int32Array; // strictly increasing class ids
  values: Float64Array; // exact image of the stored precision
}

const MAGIC = "TVITCACH";
const HEADER_SIZE = 56;
const TRAILER_SIZE = 8;
const FORMAT_VERSION = 1;

function decodeHalf(bits: number): number {
  const sign = bits & 0x8000 ? -1 : 1;
  const exp = (bits >> 10) & 0x1f;
  const frac = bits & 0x3ff;
  if (exp === 0) return sign * frac * 2 ** -24;
  if (exp === 31) return frac ? Number.NaN : sign * Infinity;
  return sign * (1 + frac * 2 ** -10) * 2 ** (exp - 15);
}

export class CacheReader {
  readonly header: EpochHeader;
  private readonly view: DataView;
  private readonly indexWidth: 2 | 4;
  private readonly valueWidth: 2 | 4;

  private constructor(bytes: Uint8Array) {
    if (bytes.length < HEADER_SIZE + TRAILER_SIZE) throw new CacheCorruptError();
    const view = new DataView(bytes.buffer, bytes.byteOffset, bytes.byteLength);
    const magic = new TextDecoder().decode(bytes.subarray(0, 8));
    if (magic !== MAGIC) throw new CacheCorruptError();
    if (crc32(bytes.subarray(0, 52)) !== view.getUint32(52, true)) {
      throw new CacheCorruptError();
    }
    const formatVersion = view.getUint16(8, true);
    if (formatVersion !== FORMAT_VERSION) throw new UnsupportedVersionError();
    const precisionCode = view.getUint8(40);
    if (precisionCode !== 0 && precisionCode !== 1) {
      throw new UnsupportedVersionError();
    }
    const numSamples = Number(view.getBigUint64(24, true));
    const numClasses = view.getUint32(32, true);
    const k = view.getUint32(36, true);
    const valuePrecision: ValuePrecision = precisionCode === 0 ? "half" : "single";
    const indexWidth = numClasses <= 65536 ? 2 : 4;
    const valueWidth = valuePrecision === "half" ? 2 : 4;
    const recordSize = 4 + k * (indexWidth + valueWidth);
    if (bytes.length !== HEADER_SIZE + numSamples * recordSize + TRAILER_SIZE) {
      throw new CacheCorruptError();
    }
    const body = bytes.subarray(0, bytes.length - TRAILER_SIZE);
    if (crc64(body) !== view.getBigUint64(bytes.length - TRAILER_SIZE, true)) {
      throw new CacheCorruptError();
    }
    this.header = {
      formatVersion,
      pipelineVersion: view.getUint16(10, true),
      epoch: view.getUint32(12, true),
      runSeed: view.getBigUint64(16, true),
      numSamples,
      numClasses,
      k,
      valuePrecision,
      shuffleSeed: view.getBigUint64(44, true),
      recordSize,
    };
    this.view = view;
    this.indexWidth = indexWidth as 2 | 4;
    this.valueWidth = valueWidth as 2 | 4;
  }

  static fromBytes(bytes: Uint8Array): CacheReader {
    return new CacheReader(bytes);
  }

  static open(path: string): CacheReader {
    return new CacheReader(readFileSync(path));
  }

  record(sampleId: number): CacheRecord {
    const { numSamples, k, recordSize } = this.header;
    if (!Number.isInteger(sampleId) || sampleId < 0 || sampleId >= numSamples) {
      throw new SampleRangeError();
    }
    let offset = HEADER_SIZE + sampleId * recordSize;
    const d0 = this.view.getUint32(offset, true);
    offset += 4;
    const indices = new Int32Array(k);
    for (let i = 0; i < k; i++) {
      indices[i] = this.indexWidth === 2
        ? this.view.getUint16(offset, true)
        : this.view.getUint32(offset, true);
      offset += this.indexWidth;
    }
    const values = new Float64Array(k);
    for (let i = 0; i < k; i++) {
      values[i] = this.valueWidth === 2
        ? decodeHalf(this.view.getUint16(offset, true))
        : this.view.getFloat32(offset, true);
      offset += this.valueWidth;
    }
    return { d0, indices, values };
  }

  /** Densified soft label: stored entries keep their probability, every
   * other class receives the residual mass spread uniformly. */
  denseTarget(sampleId: number, numClasses?: number): Float64Array {
    const c = numClasses ?? this.header.numClasses;
    const rec = this.record(sampleId);
    const k = rec.indices.length;
    if (k > c) throw new RangeError("K exceeds class count");
    let total = 0;
    for (const v of rec.values) total += v;
    if (total > 1 + 1e-6) throw new RangeError("invalid probability mass");
    const out = new Float64Array(c);
    if (k < c) {
      const residual = Math.max(0, 1 - total) / (c - k);
      out.fill(residual);
    }
    for (let i = 0; i < k; i++) {
      if (rec.indices[i] >= c) throw new RangeError("index out of range");
      out[rec.indices[i]] = rec.values[i];
    }
    return out;
  }

  /** Augmentation parameters replayed from the record's stored seed. */
  augParams(sampleId: number, spec: PipelineSpec,
            sourceHw: [number, number]): AugParams {
    return decode(this.record(sampleId).d0, spec, sourceHw);
  }
}

export function openCache(path: string): CacheReader {
  return CacheReader.open(path);
}
