#pragma once

namespace versekit {

// The 32-couplet public-domain sample corpus (JSONL poem records), embedded
// so preset runs work offline and independent of install location. The
// canonical copy lives at data/sample_corpus.jsonl.
extern const char* const kBundledCorpusJsonl;

}  // namespace versekit
