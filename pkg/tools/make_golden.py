"""Hand-assemble the golden epoch cache file checked in at
tests/data/golden_epoch0.bin.

Deliberately independent of the tinyvit package: every byte below is packed
with struct against the layout table in FORMAT.md, and the trailer CRC uses
a bit-at-a-time CRC-64/XZ rather than the library's table-driven one.  If
this script and the library ever disagree, the golden-file test fails.

Run:  python3 tools/make_golden.py
"""

import struct
import zlib
from pathlib import Path

OUT = Path(__file__).resolve().parent.parent / "tests" / "data" / "golden_epoch0.bin"


def crc64_xz_bitwise(data: bytes) -> int:
    poly = 0xC96C5795D7870F42
    crc = 0xFFFFFFFFFFFFFFFF
    for byte in data:
        crc ^= byte
        for _ in range(8):
            crc = (crc >> 1) ^ poly if crc & 1 else crc >> 1
    return crc ^ 0xFFFFFFFFFFFFFFFF


def main() -> None:
    # Header: magic, format_version=1, pipeline_version=1, epoch=0,
    # run_seed=77, num_samples=2, num_classes=10, k=2, precision=half(0),
    # 3 pad bytes, shuffle_seed, crc32 of the first 52 bytes.
    head = struct.pack("<8sHHIQQIIB3xQ", b"TVITCACH", 1, 1, 0, 77, 2, 10, 2,
                       0, 0x0123456789ABCDEF)
    head += struct.pack("<I", zlib.crc32(head))
    assert len(head) == 56

    # Records: d0 u32, K=2 indices u16 ascending, K=2 half floats alongside.
    rec0 = struct.pack("<IHHee", 0xDEADBEEF, 1, 3, 0.6, 0.3)
    rec1 = struct.pack("<IHHee", 7, 0, 9, 0.5, 0.25)
    assert len(rec0) == len(rec1) == 12

    body = head + rec0 + rec1
    blob = body + struct.pack("<Q", crc64_xz_bitwise(body))
    assert len(blob) == 56 + 2 * 12 + 8

    OUT.parent.mkdir(parents=True, exist_ok=True)
    OUT.write_bytes(blob)
    print(f"wrote {OUT} ({len(blob)} bytes)")


if __name__ == "__main__":
    main()
