/** PCG-XSH-RR 64/32 plus the fixed-point draw primitives of the decoder.
 *
 * State arithmetic runs in BigInt; the derived draws are plain float64,
 * and their formulas (`lo + (hi - lo) * u * 2^-32`, `(u * n) >> 32`) are the
 * exact IEEE-754 operations the writer used, so replayed values are
 * bit-identical. */

const MASK64 = (1n << 64n) - 1n;
const MASK32 = 0xffffffffn;
const MULTIPLIER = 6364136223846793005n;

export interface PcgState {
  state: bigint;
  increment: bigint;
}

export function pcgSeed(seed: bigint, stream?: bigint): PcgState {
  const inc = (((stream ?? seed) << 1n) | 1n) & MASK64;
  let s: PcgState = { state: 0n, increment: inc };
  s = pcgNext(s).state;
  s = { state: (s.state + seed) & MASK64, increment: inc };
  return pcgNext(s).state;
}

export function pcgNext(s: PcgState): { state: PcgState; value: number } {
  const old = s.state;
  const next = (old * MULTIPLIER + s.increment) & MASK64;
  const xorshifted = (((old >> 18n) ^ old) >> 27n) & MASK32;
  const rot = old >> 59n;
  const out = ((xorshifted >> rot) | ((xorshifted << ((64n - rot) & 31n)) & MASK32)) & MASK32;
  return { state: { state: next, increment: s.increment }, value: Number(out) };
}

export class DrawStream {
  private s: PcgState;

  constructor(seed: bigint, stream?: bigint) {
    this.s = pcgSeed(seed, stream);
  }

  nextU32(): number {
    const { state, value } = pcgNext(this.s);
    this.s = state;
    return value;
  }

  uniform(lo: number, hi: number): number {
    if (!(lo < hi)) throw new RangeError("uniform requires lo < hi");
    return lo + (hi - lo) * (this.nextU32() * 2 ** -32);
  }

  choice(n: number): number {
    if (n < 1) throw new RangeError("choice requires n >= 1");
    return Number((BigInt(this.nextU32()) * BigInt(n)) >> 32n);
  }
}
