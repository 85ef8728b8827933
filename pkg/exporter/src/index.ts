export {
  CorpusError,
  loadCorpus,
  parseSample,
  renderHistory,
  renderUtterances,
} from "./corpus.js";
export type { HistoryMode, TurnSample, Utterance } from "./corpus.js";
export { fnv1a64, mockEmbed, splitTokens, tokenBucket } from "./hash.js";
export {
  EncoderMemoryError,
  EncodingServiceError,
  MockEncoder,
  ModelLoadError,
  ServiceEncoder,
  resolveEncoder,
} from "./encoders.js";
export type { Encoder } from "./encoders.js";
export { STORE_FORMAT, StoreFormatError, cosine, readStore, writeStore } from "./store.js";
export type { LoadedStore, StoreHeader } from "./store.js";
export {
  DEFAULT_BATCH_SIZE,
  ExportError,
  renderedEntries,
  runExport,
} from "./export.js";
export type { ExportJob, ExportResult } from "./export.js";
export { runCli } from "./cli.js";
