/** Checksums used by the cache format: CRC-32 (zlib polynomial) over the
 * header body and CRC-64/XZ over the whole file. */

const CRC32_TABLE = (() => {
  const table = new Uint32Array(256);
  for (let i = 0; i < 256; i++) {
    let crc = i;
    for (let b = 0; b < 8; b++) {
      crc = crc & 1 ? (crc >>> 1) ^ 0xedb88320 : crc >>> 1;
    }
    table[i] = crc >>> 0;
  }
  return table;
})();

export function crc32(data: Uint8Array): number {
  let crc = 0xffffffff;
  for (let i = 0; i < data.length; i++) {
    crc = CRC32_TABLE[(crc ^ data[i]) & 0xff] ^ (crc >>> 8);
  }
  return (crc ^ 0xffffffff) >>> 0;
}

const CRC64_POLY = 0xc96c5795d7870f42n; // reflected CRC-64/XZ
const MASK64 = (1n << 64n) - 1n;

const CRC64_TABLE = (() => {
  const table: bigint[] = new Array(256);
  for (let i = 0; i < 256; i++) {
    let crc = BigInt(i);
    for (let b = 0; b < 8; b++) {
      crc = crc & 1n ? (crc >> 1n) ^ CRC64_POLY : crc >> 1n;
    }
    table[i] = crc & MASK64;
  }
  return table;
})();

export function crc64(data: Uint8Array): bigint {
  let crc = MASK64;
  for (let i = 0; i < data.length; i++) {
    crc = CRC64_TABLE[Number((crc ^ BigInt(data[i])) & 0xffn)] ^ (crc >> 8n);
  }
  return (crc ^ MASK64) & MASK64;
}
