#include "moa/eval.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <map>

#include <json.hpp>

#include "moa/autodiff.hpp"
#include "moa/common.hpp"

namespace moa::eval {

// ------------------------------------------------------------- perplexity

double hooked_perplexity(
    const BaseModel& base, const std::vector<data::EncodedRecord>& records,
    const std::function<std::unique_ptr<AdapterHook>(const data::Batch&)>&
        make_hook,
    data::MaskMode mode, int64_t batch_size) {
  if (records.empty()) throw UsageError("perplexity needs at least one record");
  if (batch_size < 1)
    throw UsageError(strfmt("batch size %lld < 1", (long long)batch_size));
  NoGradScope ng;
  double nll_sum = 0.0;
  int64_t scored = 0;
  for (size_t at = 0; at < records.size(); at += batch_size) {
    size_t end = std::min(records.size(), at + batch_size);
    std::vector<data::EncodedRecord> chunk(records.begin() + at,
                                           records.begin() + end);
    data::Batch batch = data::make_batch(chunk, mode);
    std::unique_ptr<AdapterHook> hook = make_hook ? make_hook(batch) : nullptr;
    LmForward f = lm_forward(base, batch, hook.get());
    nll_sum += f.lm_sum->item();
    scored += f.lm_count;
  }
  return std::exp(nll_sum / scored);
}

double moa_perplexity(const MoaModel& model,
                      const std::vector<data::EncodedRecord>& records,
                      SelectKind kind, data::MaskMode mode,
                      int64_t batch_size) {
  model.validate();
  if (records.empty()) throw UsageError("perplexity needs at least one record");
  std::vector<int32_t> chosen(records.size());
  if (kind == SelectKind::kOracle) {
    for (size_t i = 0; i < records.size(); i++)
      chosen[i] = records[i].domain_id;  // range-checked by the hook below
  } else {
    for (size_t i = 0; i < records.size(); i++)
      chosen[i] = select_expert(model, records[i].prompt, kind).expert;
  }
  size_t cursor = 0;
  return hooked_perplexity(
      model.base, records,
      [&](const data::Batch& batch) {
        std::vector<int32_t> slice(
            chosen.begin() + cursor,
            chosen.begin() + cursor + batch.lengths.size());
        cursor += batch.lengths.size();
        return std::make_unique<RoutedHook>(&model.experts, std::move(slice));
      },
      mode, batch_size);
}

// ------------------------------------------------------------ BLEU / ROUGE

const char* const kBleuSmoothingNote =
    "sentence-level BLEU-4; add-one smoothing on zero-count 2..4-gram "
    "precisions; reported as the per-domain mean";

namespace {

std::map<std::vector<int32_t>, int64_t> ngram_counts(
    const std::vector<int32_t>& seq, int64_t n) {
  std::map<std::vector<int32_t>, int64_t> counts;
  for (size_t i = 0; i + n <= seq.size(); i++)
    counts[std::vector<int32_t>(seq.begin() + i, seq.begin() + i + n)]++;
  return counts;
}

}  // namespace

double bleu4(const std::vector<int32_t>& candidate,
             const std::vector<int32_t>& reference) {
  if (reference.empty()) throw UsageError("bleu4 reference is empty");
  if (candidate.empty()) return 0.0;
  double log_sum = 0.0;
  for (int64_t n = 1; n <= 4; n++) {
    auto cand_counts = ngram_counts(candidate, n);
    auto ref_counts = ngram_counts(reference, n);
    int64_t total = (int64_t)candidate.size() >= n
                        ? (int64_t)candidate.size() - n + 1
                        : 0;
    int64_t match = 0;
    for (const auto& [gram, count] : cand_counts) {
      auto it = ref_counts.find(gram);
      if (it != ref_counts.end()) match += std::min(count, it->second);
    }
    double p;
    if (match > 0) {
      p = (double)match / (double)total;
    } else if (n == 1) {
      return 0.0;  // no unigram overlap at all
    } else {
      p = (match + 1.0) / (total + 1.0);
    }
    log_sum += std::log(p);
  }
  double bp = candidate.size() >= reference.size()
                  ? 1.0
                  : std::exp(1.0 - (double)reference.size() /
                                       (double)candidate.size());
  return bp * std::exp(log_sum / 4.0);
}

double rouge_l(const std::vector<int32_t>& candidate,
               const std::vector<int32_t>& reference) {
  if (reference.empty()) throw UsageError("rouge_l reference is empty");
  if (candidate.empty()) return 0.0;
  // classic LCS table, two rolling rows
  std::vector<int64_t> prev(reference.size() + 1, 0);
  std::vector<int64_t> cur(reference.size() + 1, 0);
  for (size_t i = 0; i < candidate.size(); i++) {
    for (size_t j = 0; j < reference.size(); j++) {
      cur[j + 1] = candidate[i] == reference[j]
                       ? prev[j] + 1
                       : std::max(prev[j + 1], cur[j]);
    }
    std::swap(prev, cur);
  }
  int64_t lcs = prev[reference.size()];
  if (lcs == 0) return 0.0;
  double p = (double)lcs / (double)candidate.size();
  double r = (double)lcs / (double)reference.size();
  return 2.0 * p * r / (p + r);
}

// ------------------------------------------------------------------- exams

namespace {

bool is_choice_letter(char u) {
  return u == 'A' || u == 'B' || u == 'C' || u == 'D';
}

// uppercase letters of the gold answer, sorted and deduplicated
std::string normalize_answer(const std::string& gold) {
  std::string s;
  for (char c : gold)
    if (std::isalpha((unsigned char)c))
      s.push_back((char)std::toupper((unsigned char)c));
  std::sort(s.begin(), s.end());
  s.erase(std::unique(s.begin(), s.end()), s.end());
  return s;
}

// gold answers scored by the exam metric: a set of choice letters, or a
// single T/F
bool exam_scorable(const std::string& gold) {
  if (gold.empty()) return false;
  for (char c : gold)
    if (!std::isalpha((unsigned char)c)) return false;
  std::string n = normalize_answer(gold);
  if (n == "T" || n == "F") return gold.size() == 1;
  for (char c : n)
    if (!is_choice_letter(c)) return false;
  return true;
}

}  // namespace

std::string extract_exam_answer(const std::string& output) {
  std::string last;
  size_t i = 0;
  const size_t n = output.size();
  while (i < n) {
    if (!std::isalnum((unsigned char)output[i])) {
      i++;
      continue;
    }
    size_t j = i;
    bool all_alpha = true;
    while (j < n && std::isalnum((unsigned char)output[j])) {
      if (!std::isalpha((unsigned char)output[j])) all_alpha = false;
      j++;
    }
    if (all_alpha) {
      if (j - i == 1) {
        char u = (char)std::toupper((unsigned char)output[i]);
        if (is_choice_letter(u) || u == 'T' || u == 'F') last.assign(1, u);
      } else {
        // multi-select: an all-uppercase run of distinct choice letters
        bool ok = true;
        int seen = 0;
        for (size_t k = i; k < j && ok; k++) {
          char c = output[k];
          if (!std::isupper((unsigned char)c) || !is_choice_letter(c)) {
            ok = false;
          } else {
            int bit = 1 << (c - 'A');
            if (seen & bit) ok = false;
            seen |= bit;
          }
        }
        if (ok) {
          std::string s(output.begin() + i, output.begin() + j);
          std::sort(s.begin(), s.end());
          last = std::move(s);
        }
      }
    }
    i = j;
  }
  return last;
}

ExamScore exam_accuracy(const std::vector<std::string>& outputs,
                        const std::vector<std::string>& gold) {
  if (outputs.size() != gold.size())
    throw UsageError(strfmt("exam outputs (%zu) and gold (%zu) differ in size",
                            outputs.size(), gold.size()));
  ExamScore score;
  score.total = (int64_t)outputs.size();
  for (size_t i = 0; i < outputs.size(); i++) {
    std::string got = extract_exam_answer(outputs[i]);
    if (!got.empty() && got == normalize_answer(gold[i])) score.right++;
  }
  score.accuracy = score.total ? (double)score.right / (double)score.total : 0.0;
  return score;
}

// -------------------------------------------------------------- generation

Generation generate(const MoaModel& model, const std::vector<int32_t>& prompt,
                    SelectKind kind, int64_t max_new_tokens,
                    int32_t oracle_label) {
  model.validate();
  if (prompt.empty()) throw UsageError("generation prompt is empty");
  if (max_new_tokens < 0)
    throw UsageError(
        strfmt("max_new_tokens %lld is negative", (long long)max_new_tokens));
  const int64_t ctx = model.base.config.max_seq_len;
  const int64_t prefix = (int64_t)prompt.size() + 2;  // bos + prompt + sep
  // step k forwards prefix + k - 1 tokens, so the room left is:
  const int64_t room = ctx - prefix + 1;
  if (room < 1)
    throw UsageError(strfmt(
        "prompt of %zu tokens leaves no generation budget (context %lld)",
        prompt.size(), (long long)ctx));

  Generation gen;
  gen.selection = select_expert(model, prompt, kind, oracle_label);

  NoGradScope ng;
  RoutedHook hook(&model.experts, {gen.selection.expert});
  std::vector<int32_t> seq;
  seq.reserve(prefix + std::min(max_new_tokens, room));
  seq.push_back(data::kBos);
  seq.insert(seq.end(), prompt.begin(), prompt.end());
  seq.push_back(data::kSep);

  const int64_t budget = std::min(max_new_tokens, room);
  const int64_t vocab = model.base.config.vocab_size;
  for (int64_t step = 0; step < budget; step++) {
    const int64_t t = (int64_t)seq.size();
    IntMat tokens(1, t);
    std::copy(seq.begin(), seq.end(), tokens.v.begin());
    ForwardResult out = base_forward(model.base, tokens, {t}, &hook);
    const int64_t off = (t - 1) * vocab;  // logits row of the last position
    int64_t best = 0;
    for (int64_t v = 1; v < vocab; v++)
      if (out.logits->get(off + v) > out.logits->get(off + best)) best = v;
    if (best == data::kEos) {
      gen.hit_eos = true;
      break;
    }
    gen.tokens.push_back((int32_t)best);
    seq.push_back((int32_t)best);
  }
  return gen;
}

// ------------------------------------------------------------ judge prompt

namespace {

// template for scoring an answer with an external judge model; placeholders
// are filled by format_judge_prompt
constexpr const char* kJudgeTemplate =
    R"(You will receive three parts of content: the questioner's question, the user's answer, and the reference answer.
Your task is to score the accuracy of the user's answer based on the following criteria. Please ensure that you read and understand these instructions carefully.
Evaluation Criteria:
Accuracy - Whether the user's answer is consistent with the reference answer and has addressed the questioner's question. We define this dimension as 'whether the user's answer includes all the key points from the reference answer and has addressed the questioner's question.'
Evaluation Steps:
1. Carefully read the questioner's question, understand the key points of the question.
2. Carefully read the reference answer, understand the key points related to the question contained in the reference answer.
3. Check if the user's answer includes the key points from the reference answer and has addressed the questioner's question.
4. Based on the evaluation criteria, score within a range of 0 to 100, where 0 means the user's answer does not contain any key points from the reference answer and has completely failed to address the questioner's question; 100 means the user's answer includes all the key points from the reference answer and has correctly and completely addressed the questioner's question.
Example: Questioner's question: [query] User's answer: [llm_answer] Reference answer: [fact]
Evaluation result (score only):
Accuracy (0-100):
)";

}  // namespace

std::string format_judge_prompt(const std::string& query,
                                const std::string& llm_answer,
                                const std::string& fact) {
  if (query.empty() || llm_answer.empty() || fact.empty())
    throw UsageError("judge prompt fields must all be non-empty");
  const std::string tpl = kJudgeTemplate;
  // splice at the template's own placeholder positions so substituted text
  // is never rescanned
  const size_t pq = tpl.find("[query]");
  const size_t pa = tpl.find("[llm_answer]", pq);
  const size_t pf = tpl.find("[fact]", pa);
  std::string out;
  out.reserve(tpl.size() + query.size() + llm_answer.size() + fact.size());
  out.append(tpl, 0, pq);
  out += query;
  const size_t aq = pq + std::strlen("[query]");
  out.append(tpl, aq, pa - aq);
  out += llm_answer;
  const size_t aa = pa + std::strlen("[llm_answer]");
  out.append(tpl, aa, pf - aa);
  out += fact;
  out.append(tpl, pf + std::strlen("[fact]"), std::string::npos);
  return out;
}

// ----------------------------------------------------------------- reports

void fill_report_means(EvalReport& report) {
  report.mean_ppl = 0.0;
  report.mean_bleu = 0.0;
  report.mean_rouge = 0.0;
  report.mean_router_acc = 0.0;
  double exam_sum = 0.0;
  int64_t exam_rows = 0;
  for (const DomainEval& row : report.rows) {
    report.mean_ppl += row.ppl;
    report.mean_bleu += row.bleu;
    report.mean_rouge += row.rouge;
    report.mean_router_acc += row.router_acc;
    if (row.exam_acc >= 0.0) {
      exam_sum += row.exam_acc;
      exam_rows++;
    }
  }
  const double n = (double)report.rows.size();
  if (n > 0) {
    report.mean_ppl /= n;
    report.mean_bleu /= n;
    report.mean_rouge /= n;
    report.mean_router_acc /= n;
  }
  report.mean_exam_acc = exam_rows ? exam_sum / exam_rows : -1.0;
}

EvalReport evaluate_moa(
    const MoaModel& model, const std::vector<std::string>& domain_names,
    const std::vector<std::vector<data::EncodedRecord>>& tests,
    SelectKind kind, int64_t max_new_tokens, data::MaskMode mode,
    int64_t batch_size) {
  model.validate();
  if (domain_names.size() != tests.size())
    throw UsageError(strfmt("%zu domain names for %zu test sets",
                            domain_names.size(), tests.size()));
  if (domain_names.empty()) throw UsageError("no domains to evaluate");

  EvalReport report;
  report.bleu_smoothing = kBleuSmoothingNote;
  for (size_t d = 0; d < domain_names.size(); d++) {
    const std::vector<data::EncodedRecord>& recs = tests[d];
    if (recs.empty())
      throw UsageError(
          strfmt("domain %s has no eval records", domain_names[d].c_str()));
    DomainEval row;
    row.domain = domain_names[d];
    row.count = (int64_t)recs.size();

    // one router pass per record: majority-vote accuracy, plus the routing
    // decision the requested mode would take
    std::vector<int32_t> route(recs.size());
    int64_t vote_right = 0;
    for (size_t i = 0; i < recs.size(); i++) {
      Selection sel = select_expert(model, recs[i].prompt, SelectKind::kVote);
      if (sel.expert == recs[i].domain_id) vote_right++;
      switch (kind) {
        case SelectKind::kOracle: route[i] = recs[i].domain_id; break;
        case SelectKind::kVote: route[i] = sel.expert; break;
        case SelectKind::kLast: route[i] = sel.votes.back(); break;
      }
    }
    row.router_acc = (double)vote_right / (double)recs.size();

    {
      NoGradScope ng;
      double nll_sum = 0.0;
      int64_t scored = 0;
      for (size_t at = 0; at < recs.size(); at += batch_size) {
        size_t end = std::min(recs.size(), at + (size_t)batch_size);
        std::vector<data::EncodedRecord> chunk(recs.begin() + at,
                                               recs.begin() + end);
        data::Batch batch = data::make_batch(chunk, mode);
        RoutedHook hook(&model.experts,
                        std::vector<int32_t>(route.begin() + at,
                                             route.begin() + end));
        LmForward f = lm_forward(model.base, batch, &hook);
        nll_sum += f.lm_sum->item();
        scored += f.lm_count;
      }
      row.ppl = std::exp(nll_sum / scored);
    }

    double bleu_sum = 0.0, rouge_sum = 0.0;
    std::vector<std::string> exam_out, exam_gold;
    for (const data::EncodedRecord& rec : recs) {
      Generation gen =
          generate(model, rec.prompt, kind, max_new_tokens, rec.domain_id);
      bleu_sum += bleu4(gen.tokens, rec.response);
      rouge_sum += rouge_l(gen.tokens, rec.response);
      if (exam_scorable(rec.gold)) {
        exam_out.push_back(data::detokenize(gen.tokens));
        exam_gold.push_back(rec.gold);
      }
    }
    row.bleu = bleu_sum / (double)recs.size();
    row.rouge = rouge_sum / (double)recs.size();
    if (!exam_gold.empty()) {
      ExamScore score = exam_accuracy(exam_out, exam_gold);
      row.exam_total = score.total;
      row.exam_right = score.right;
      row.exam_acc = score.accuracy;
    }
    report.rows.push_back(std::move(row));
  }
  fill_report_means(report);
  return report;
}

std::string report_json(const EvalReport& report) {
  nlohmann::ordered_json j;
  j["bleu_smoothing"] = report.bleu_smoothing;
  j["domains"] = nlohmann::ordered_json::array();
  for (const DomainEval& row : report.rows) {
    nlohmann::ordered_json r;
    r["domain"] = row.domain;
    r["count"] = row.count;
    r["ppl"] = row.ppl;
    r["bleu4"] = row.bleu;
    r["rouge_l"] = row.rouge;
    r["router_acc"] = row.router_acc;
    if (row.exam_acc >= 0.0) {
      r["exam_total"] = row.exam_total;
      r["exam_right"] = row.exam_right;
      r["exam_acc"] = row.exam_acc;
    } else {
      r["exam_acc"] = nullptr;
    }
    j["domains"].push_back(std::move(r));
  }
  nlohmann::ordered_json avg;
  avg["ppl"] = report.mean_ppl;
  avg["bleu4"] = report.mean_bleu;
  avg["rouge_l"] = report.mean_rouge;
  avg["router_acc"] = report.mean_router_acc;
  if (report.mean_exam_acc >= 0.0)
    avg["exam_acc"] = report.mean_exam_acc;
  else
    avg["exam_acc"] = nullptr;
  j["average"] = std::move(avg);
  return j.dump(2);
}

std::string report_table(const EvalReport& report) {
  std::string out = strfmt("%s\n", report.bleu_smoothing.c_str());
  out += strfmt("%-20s %6s %10s %8s %8s %8s %8s\n", "domain", "n", "ppl",
                "bleu4", "rougeL", "router", "exam");
  auto exam_cell = [](double acc) {
    return acc >= 0.0 ? strfmt("%8.3f", acc) : strfmt("%8s", "n/a");
  };
  for (const DomainEval& row : report.rows) {
    out += strfmt("%-20s %6lld %10.3f %8.3f %8.3f %8.3f %s\n",
                  row.domain.c_str(), (long long)row.count, row.ppl, row.bleu,
                  row.rouge, row.router_acc, exam_cell(row.exam_acc).c_str());
  }
  out += strfmt("%-20s %6s %10.3f %8.3f %8.3f %8.3f %s\n", "average", "-",
                report.mean_ppl, report.mean_bleu, report.mean_rouge,
                report.mean_router_acc, exam_cell(report.mean_exam_acc).c_str());
  return out;
}

}  // namespace moa::eval
