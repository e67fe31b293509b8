#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moa/common.hpp"
#include "moa/tensor.hpp"

namespace moa::data {

// Byte-level tokenizer: ids 0..255 are raw bytes, specials follow.
constexpr int32_t kPad = 256;
constexpr int32_t kBos = 257;
constexpr int32_t kEos = 258;
constexpr int32_t kSep = 259;
constexpr int32_t kVocabSize = 260;

std::vector<int32_t> tokenize(const std::string& text);
// Inverse on the byte payload; special ids are skipped.
std::string detokenize(const std::vector<int32_t>& ids);

// A task family with a deterministic answer rule. Every record's response
// is the oracle output for its prompt, so supervised targets are exact.
struct DomainSpec {
  std::string name;
  std::string archetype;  // one of the six families below
};

// exam-mcq          arithmetic multiple choice, single letter answer
// strict-format-tool request text -> rigid tool-call serialization
// arithmetic-qa     bare expression -> numeric result
// code-transform    variable rename inside a code snippet
// cot-chain         three-step worked arithmetic with a final line
// templated-qa      fictional atlas lookup with a derived capital name
std::vector<DomainSpec> default_domains();

struct Record {
  std::string domain;
  std::string prompt;
  std::string response;
  std::string gold;  // short extractable answer; empty when not applicable
};

struct Corpus {
  std::vector<Record> train, val, test;
};

// Deterministic in (spec, sizes, seed); records are unique across all three
// splits. Throws DataError if the template space cannot supply enough
// distinct records.
Corpus gen_domain(const DomainSpec& spec, int n_train, int n_val, int n_test,
                  uint64_t seed);

// One JSON object per line: {"domain","prompt","response","gold"}.
void write_jsonl(const std::string& path, const std::vector<Record>& recs);
std::vector<Record> read_jsonl(const std::string& path);

// Writes {domain}.{train,val,test}.jsonl under out_dir for every spec.
void gen_corpus(const std::vector<DomainSpec>& specs, const std::string& out_dir,
                int n_train, int n_val, int n_test, uint64_t seed);
std::vector<Record> read_split(const std::string& dir,
                               const std::string& domain,
                               const std::string& split);

struct EncodedRecord {
  int32_t domain_id = 0;
  std::vector<int32_t> prompt;    // raw bytes, no specials
  std::vector<int32_t> response;  // raw bytes, no specials
  std::string gold;
};

// Validates non-empty prompt/response and that the assembled sequence
// [bos] prompt [sep] response [eos] fits in max_seq.
EncodedRecord encode_record(const Record& rec,
                            const std::vector<std::string>& domain_names,
                            int64_t max_seq);
std::vector<EncodedRecord> encode_records(
    const std::vector<Record>& recs,
    const std::vector<std::string>& domain_names, int64_t max_seq);

enum class MaskMode { kFullSequence, kResponseOnly };

struct Batch {
  IntMat tokens;     // (B,T), padded with kPad
  IntMat targets;    // (B,T): targets.at(b,t) = next token if scored, else -1
  IntMat loss_mask;  // (B,T): 1 where the token at that position is scored
  std::vector<int64_t> lengths;         // valid tokens per row
  std::vector<int64_t> prompt_lengths;  // bos + prompt + sep prefix per row
  std::vector<int32_t> labels;          // domain id per row
};

// loss_mask marks tokens the model must predict: position 0 (bos) and padding
// are never scored; kResponseOnly also clears prompt and separator positions.
// targets are pre-shifted: the logits at position t are scored against
// targets(t) = tokens(t+1) wherever loss_mask(t+1) is 1.
Batch make_batch(const std::vector<EncodedRecord>& recs, MaskMode mode);

// One epoch over a single domain: shuffled, chunked, deterministic in seed.
std::vector<std::vector<int64_t>> single_domain_schedule(int64_t n,
                                                         int64_t batch_size,
                                                         uint64_t seed);

// One epoch over N domains with even consumption: each domain contributes
// exactly min(sizes) records, globally shuffled, chunked into batches of
// (domain, index) pairs. Deterministic in seed.
std::vector<std::vector<std::pair<int32_t, int64_t>>> even_sample_schedule(
    const std::vector<int64_t>& sizes, int64_t batch_size, uint64_t seed);

Batch gather_batch(const std::vector<std::vector<EncodedRecord>>& domains,
                   const std::vector<std::pair<int32_t, int64_t>>& picks,
                   MaskMode mode);

}  // namespace moa::data
