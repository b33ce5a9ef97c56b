export {
  CacheCorruptError,
  CacheReader,
  CacheRecord,
  EpochHeader,
  SampleRangeError,
  UnsupportedVersionError,
  ValuePrecision,
  openCache,
} from "./reader.js";
export {
  AugParams,
  DEFAULT_SPEC,
  EraseBox,
  MixParams,
  PipelineSpec,
  decode,
} from "./decode.js";
export { DrawStream, PcgState, pcgNext, pcgSeed } from "./pcg.js";
export { crc32, crc64 } from "./crc.js";
