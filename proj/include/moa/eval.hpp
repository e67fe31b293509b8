#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "moa/adapters.hpp"
#include "moa/data.hpp"

namespace moa::eval {

// exp(mean NLL over scored positions), with adaptation supplied per batch
// by the caller. make_hook may return nullptr for the plain base model.
double hooked_perplexity(
    const BaseModel& base, const std::vector<data::EncodedRecord>& records,
    const std::function<std::unique_ptr<AdapterHook>(const data::Batch&)>&
        make_hook,
    data::MaskMode mode, int64_t batch_size);

// Perplexity of the full model. kOracle routes each sequence through the
// expert of its true label; kVote / kLast run the router on the prompt and
// route through whatever it picks.
double moa_perplexity(const MoaModel& model,
                      const std::vector<data::EncodedRecord>& records,
                      SelectKind kind,
                      data::MaskMode mode = data::MaskMode::kResponseOnly,
                      int64_t batch_size = 8);

// Sentence-level BLEU-4: geometric mean of clipped 1..4-gram precisions
// times the brevity penalty. Zero-count higher-order precisions are
// add-one smoothed ((m+1)/(t+1)); unigram precision is left raw, so a
// candidate sharing no unigram with the reference scores 0. An empty
// candidate scores 0.
double bleu4(const std::vector<int32_t>& candidate,
             const std::vector<int32_t>& reference);

// Description of the smoothing, embedded in every report so scores are
// comparable across runs.
extern const char* const kBleuSmoothingNote;

// ROUGE-L F1 (beta = 1): P = LCS/|cand|, R = LCS/|ref|, F = 2PR/(P+R);
// 0 when the LCS is empty.
double rouge_l(const std::vector<int32_t>& candidate,
               const std::vector<int32_t>& reference);

// ------------------------------------------------------------------- exams

// Pulls the answer out of free-form model text: the last standalone token
// that is a single option letter (A-D, T, F, case-insensitive) or an
// all-uppercase run of distinct choice letters ("ACD"). Multi-letter picks
// come back sorted; returns "" when no such token exists.
std::string extract_exam_answer(const std::string& output);

struct ExamScore {
  int64_t total = 0;
  int64_t right = 0;
  double accuracy = 0.0;
};

// Scores outputs against gold answers (each a letter set like "B", "T" or
// "ACD"). Gold is normalized to a sorted unique uppercase set; an output
// with no extractable answer counts as wrong.
ExamScore exam_accuracy(const std::vector<std::string>& outputs,
                        const std::vector<std::string>& gold);

// -------------------------------------------------------------- generation

struct Generation {
  std::vector<int32_t> tokens;  // continuation only; eos not included
  Selection selection;          // how the expert was picked from the prompt
  bool hit_eos = false;
};

// Greedy decoding of [bos] prompt [sep] -> continuation. The expert is
// selected once from the prompt and serves every generated token. Stops at
// eos, at max_new_tokens, or when the context window is full, whichever
// comes first. Throws if the prompt alone leaves no room to generate.
Generation generate(const MoaModel& model, const std::vector<int32_t>& prompt,
                    SelectKind kind, int64_t max_new_tokens,
                    int32_t oracle_label = -1);

// ------------------------------------------------------------ judge prompt

// Fills the external-judge scoring template with the question, the model's
// answer and the reference answer. The result ends with the line the judge
// is expected to complete: "Accuracy (0-100):".
std::string format_judge_prompt(const std::string& query,
                                const std::string& llm_answer,
                                const std::string& fact);

// ----------------------------------------------------------------- reports

struct DomainEval {
  std::string domain;
  int64_t count = 0;       // records evaluated
  double ppl = 0.0;
  double bleu = 0.0;       // mean of sentence-level BLEU-4
  double rouge = 0.0;      // mean of sentence-level ROUGE-L F1
  double router_acc = 0.0; // majority-vote selection vs true label
  int64_t exam_total = 0;  // records whose gold is an option-letter set
  int64_t exam_right = 0;
  double exam_acc = -1.0;  // -1 when no record is exam-scorable
};

struct EvalReport {
  std::vector<DomainEval> rows;
  std::string bleu_smoothing;  // kBleuSmoothingNote
  double mean_ppl = 0.0;
  double mean_bleu = 0.0;
  double mean_rouge = 0.0;
  double mean_router_acc = 0.0;
  double mean_exam_acc = -1.0;  // over exam-scorable domains only
};

// Recomputes the macro averages from the rows (exam accuracy averages the
// rows where it applies).
void fill_report_means(EvalReport& report);

// Full per-domain protocol: perplexity under the chosen routing, greedy
// generation scored with BLEU-4 / ROUGE-L against the reference response,
// majority-vote router accuracy, and exam accuracy where gold answers are
// option letters. tests[i] holds the held-out records of domain_names[i].
EvalReport evaluate_moa(const MoaModel& model,
                        const std::vector<std::string>& domain_names,
                        const std::vector<std::vector<data::EncodedRecord>>& tests,
                        SelectKind kind, int64_t max_new_tokens = 64,
                        data::MaskMode mode = data::MaskMode::kResponseOnly,
                        int64_t batch_size = 8);

std::string report_json(const EvalReport& report);
std::string report_table(const EvalReport& report);

}  // namespace moa::eval
