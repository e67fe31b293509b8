#include "moa/data.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <unordered_set>

#include <json.hpp>

#include "moa/rng.hpp"

namespace moa::data {

std::vector<int32_t> tokenize(const std::string& text) {
  std::vector<int32_t> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(static_cast<int32_t>(c));
  return ids;
}

std::string detokenize(const std::vector<int32_t>& ids) {
  std::string out;
  out.reserve(ids.size());
  for (int32_t id : ids)
    if (id >= 0 && id < 256) out.push_back(static_cast<char>(id));
  return out;
}

std::vector<DomainSpec> default_domains() {
  return {{"exam", "exam-mcq"},          {"tool", "strict-format-tool"},
          {"arith", "arithmetic-qa"},    {"code", "code-transform"},
          {"cot", "cot-chain"},          {"atlas", "templated-qa"}};
}

namespace {

template <typename T>
void shuffle_vec(std::vector<T>& v, Rng& rng) {
  for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; i--)
    std::swap(v[i], v[rng.uniform_int(0, i)]);
}

Record gen_arith(Rng& rng) {
  int64_t a = rng.uniform_int(2, 99), b = rng.uniform_int(2, 99);
  int op = static_cast<int>(rng.uniform_int(0, 2));
  const char sym = "+-*"[op];
  long long ans = op == 0 ? a + b : op == 1 ? a - b : a * b;
  Record r;
  r.prompt = strfmt("Compute: %lld %c %lld =", static_cast<long long>(a), sym,
                    static_cast<long long>(b));
  r.response = strfmt("%lld", ans);
  r.gold = r.response;
  return r;
}

Record gen_exam(Rng& rng) {
  int64_t a = rng.uniform_int(2, 60), b = rng.uniform_int(2, 60);
  bool mul = rng.uniform_int(0, 1) == 1;
  long long ans = mul ? a * b : a + b;
  int pos = static_cast<int>(rng.uniform_int(0, 3));
  long long opts[4];
  std::set<long long> used{ans};
  for (int i = 0; i < 4; i++) {
    if (i == pos) {
      opts[i] = ans;
      continue;
    }
    long long v;
    do {
      v = ans + rng.uniform_int(-9, 9);
    } while (used.count(v));
    used.insert(v);
    opts[i] = v;
  }
  Record r;
  r.prompt = strfmt(
      "Q: What is %lld %c %lld? (A) %lld (B) %lld (C) %lld (D) %lld "
      "ChooseOne:",
      static_cast<long long>(a), mul ? '*' : '+', static_cast<long long>(b),
      opts[0], opts[1], opts[2], opts[3]);
  r.response = std::string(1, static_cast<char>('A' + pos));
  r.gold = r.response;
  return r;
}

Record gen_tool(Rng& rng) {
  static const char* kCities[] = {
      "Oslo",   "Lima",    "Quito",  "Perth",  "Turin", "Kyoto",
      "Hanoi",  "Porto",   "Malmo",  "Bergen", "Leeds", "Graz",
      "Basel",  "Gdansk",  "Tartu",  "Vaasa",  "Split", "Brno",
      "Liege",  "Nantes",  "Parma",  "Sevilla", "Varna", "Arhus"};
  static const char* kWords[] = {
      "ledger",  "compass", "lantern", "mosaic",  "quartz",  "velvet",
      "anchor",  "bramble", "cinder",  "drifter", "ember",   "falcon",
      "glacier", "harbor",  "isthmus", "juniper", "keystone", "lattice",
      "meadow",  "nickel",  "orchard", "pallet",  "quiver",  "russet",
      "saddle",  "thicket", "umber",   "vessel",  "willow",  "zephyr"};
  static const char* kLangs[] = {"Dutch", "Finnish", "Greek",
                                 "Polish", "Czech",  "Danish"};
  int id = static_cast<int>(rng.uniform_int(100, 999));
  int form = static_cast<int>(rng.uniform_int(0, 3));
  Record r;
  switch (form) {
    case 0: {
      const char* city = kCities[rng.uniform_int(0, 23)];
      r.prompt = strfmt("ToolRequest #%d: get weather for %s", id, city);
      r.response = strfmt(
          "<tool>{\"id\":%d,\"name\":\"weather\",\"arg\":\"%s\"}</tool>", id,
          city);
      break;
    }
    case 1: {
      int n = static_cast<int>(rng.uniform_int(1, 500));
      r.prompt = strfmt("ToolRequest #%d: set timer for %d minutes", id, n);
      r.response = strfmt(
          "<tool>{\"id\":%d,\"name\":\"timer\",\"arg\":\"%d\"}</tool>", id, n);
      break;
    }
    case 2: {
      const char* word = kWords[rng.uniform_int(0, 29)];
      const char* lang = kLangs[rng.uniform_int(0, 5)];
      r.prompt = strfmt("ToolRequest #%d: translate %s to %s", id, word, lang);
      r.response = strfmt(
          "<tool>{\"id\":%d,\"name\":\"translate\",\"arg\":\"%s|%s\"}</tool>",
          id, word, lang);
      break;
    }
    default: {
      const char* word = kWords[rng.uniform_int(0, 29)];
      r.prompt = strfmt("ToolRequest #%d: search notes for %s", id, word);
      r.response = strfmt(
          "<tool>{\"id\":%d,\"name\":\"search\",\"arg\":\"%s\"}</tool>", id,
          word);
      break;
    }
  }
  r.gold = r.response;
  return r;
}

Record gen_code(Rng& rng) {
  static const char* kOld[] = {"a", "b", "c", "x", "y",
                               "z", "n", "m", "k", "w"};
  static const char* kNew[] = {"total", "count", "acc",   "left",
                               "right", "tmp",   "size",  "depth",
                               "score", "width", "steps", "bound"};
  const char* oldv = kOld[rng.uniform_int(0, 9)];
  const char* newv = kNew[rng.uniform_int(0, 11)];
  int a = static_cast<int>(rng.uniform_int(2, 99));
  int b = static_cast<int>(rng.uniform_int(2, 99));
  int form = static_cast<int>(rng.uniform_int(0, 1));
  auto render = [&](const char* v) {
    return form == 0
               ? strfmt("int %s = %d ; %s = %s + %d ; return %s ;", v, a, v, v,
                        b, v)
               : strfmt(
                     "int %s = %d ; for ( int i = 0 ; i < %d ; i ++ ) %s += i "
                     "; return %s ;",
                     v, a, b, v, v);
  };
  Record r;
  r.prompt = strfmt("Refactor rename %s -> %s in: %s", oldv, newv,
                    render(oldv).c_str());
  r.response = render(newv);
  r.gold = "";
  return r;
}

Record gen_cot(Rng& rng) {
  int s = static_cast<int>(rng.uniform_int(2, 30));
  int a = static_cast<int>(rng.uniform_int(2, 30));
  int m = static_cast<int>(rng.uniform_int(2, 4));
  int d = static_cast<int>(rng.uniform_int(2, 20));
  int x = s + a, y = x * m, z = y - d;
  Record r;
  r.prompt = strfmt(
      "Solve stepwise: start with %d, add %d, multiply by %d, subtract %d.", s,
      a, m, d);
  r.response = strfmt(
      "Step 1: %d + %d = %d Step 2: %d * %d = %d Step 3: %d - %d = %d "
      "Final: %d",
      s, a, x, x, m, y, y, d, z, z);
  r.gold = strfmt("%d", z);
  return r;
}

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

Record gen_atlas(Rng& rng) {
  static const char* kFirst[] = {"Zor", "Vel", "Mar", "Tor", "Bel",
                                 "Kar", "Nor", "Sal", "Dra", "Fen",
                                 "Gol", "Hin", "Lor", "Pax"};
  static const char* kMid[] = {"va", "do", "mi", "ka", "lu", "ne",
                               "ra", "so", "ti", "bu", "ge", "wo"};
  static const char* kLast[] = {"nia",  "land", "stan", "mark", "tia",
                                "gard", "via",  "dor",  "heim", "lund"};
  static const char* kCapA[] = {"Brel", "Tarn", "Vos",  "Kel",
                                "Myr",  "Hald", "Quil", "Zan"};
  static const char* kCapB[] = {"kan", "dor",  "mir", "tha",
                                "vek", "lin",  "grad", "holm"};
  std::string country = kFirst[rng.uniform_int(0, 13)];
  country += kMid[rng.uniform_int(0, 11)];
  if (rng.uniform_int(0, 1)) country += kMid[rng.uniform_int(0, 11)];
  country += kLast[rng.uniform_int(0, 9)];
  // The capital is a pure function of the country name, so every mention
  // of a country across records and splits agrees.
  uint64_t h = fnv1a(country);
  std::string capital =
      std::string(kCapA[h % 8]) + kCapB[(h >> 3) % 8];
  Record r;
  r.prompt = strfmt("Lookup: capital of %s?", country.c_str());
  r.response = strfmt("The capital of %s is %s.", country.c_str(),
                      capital.c_str());
  r.gold = capital;
  return r;
}

Record (*generator_for(const std::string& archetype))(Rng&) {
  if (archetype == "arithmetic-qa") return gen_arith;
  if (archetype == "exam-mcq") return gen_exam;
  if (archetype == "strict-format-tool") return gen_tool;
  if (archetype == "code-transform") return gen_code;
  if (archetype == "cot-chain") return gen_cot;
  if (archetype == "templated-qa") return gen_atlas;
  throw UsageError(strfmt("unknown archetype '%s'", archetype.c_str()));
}

}  // namespace

Corpus gen_domain(const DomainSpec& spec, int n_train, int n_val, int n_test,
                  uint64_t seed) {
  if (n_train < 10)
    throw UsageError("gen_domain: need at least 10 training records");
  if (n_val < 0 || n_test < 0) throw UsageError("gen_domain: negative count");
  auto* gen = generator_for(spec.archetype);
  Rng rng = Rng::fork(seed, spec.name + "/gen");
  std::unordered_set<std::string> seen;
  Corpus c;
  auto fill = [&](std::vector<Record>& out, int n) {
    int64_t attempts = 0, budget = 200ll * (n + 10);
    while (static_cast<int>(out.size()) < n) {
      if (++attempts > budget)
        throw DataError(
            strfmt("gen_domain: archetype '%s' cannot supply %d distinct "
                   "records",
                   spec.archetype.c_str(), n));
      Record r = gen(rng);
      if (!seen.insert(r.prompt).second) continue;  // splits stay disjoint
      r.domain = spec.name;
      out.push_back(std::move(r));
    }
  };
  fill(c.train, n_train);
  fill(c.val, n_val);
  fill(c.test, n_test);
  return c;
}

void write_jsonl(const std::string& path, const std::vector<Record>& recs) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError(strfmt("cannot open '%s' for writing", path.c_str()));
  for (const auto& r : recs) {
    nlohmann::ordered_json j;
    j["domain"] = r.domain;
    j["prompt"] = r.prompt;
    j["response"] = r.response;
    j["gold"] = r.gold.empty() ? nlohmann::ordered_json(nullptr)
                               : nlohmann::ordered_json(r.gold);
    f << j.dump() << "\n";
  }
  if (!f) throw DataError(strfmt("write to '%s' failed", path.c_str()));
}

std::vector<Record> read_jsonl(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError(strfmt("cannot open '%s'", path.c_str()));
  std::vector<Record> recs;
  std::string line;
  int64_t lineno = 0;
  while (std::getline(f, line)) {
    lineno++;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("domain") ||
        !j.contains("prompt") || !j.contains("response"))
      throw DataError(strfmt("%s:%lld: malformed record", path.c_str(),
                             static_cast<long long>(lineno)));
    Record r;
    r.domain = j["domain"].get<std::string>();
    r.prompt = j["prompt"].get<std::string>();
    r.response = j["response"].get<std::string>();
    if (j.contains("gold") && !j["gold"].is_null())
      r.gold = j["gold"].get<std::string>();
    recs.push_back(std::move(r));
  }
  return recs;
}

void gen_corpus(const std::vector<DomainSpec>& specs, const std::string& out_dir,
                int n_train, int n_val, int n_test, uint64_t seed) {
  std::filesystem::create_directories(out_dir);
  for (const auto& spec : specs) {
    Corpus c = gen_domain(spec, n_train, n_val, n_test, seed);
    auto base = std::filesystem::path(out_dir) / spec.name;
    write_jsonl(base.string() + ".train.jsonl", c.train);
    write_jsonl(base.string() + ".val.jsonl", c.val);
    write_jsonl(base.string() + ".test.jsonl", c.test);
  }
}

std::vector<Record> read_split(const std::string& dir,
                               const std::string& domain,
                               const std::string& split) {
  auto path = std::filesystem::path(dir) / (domain + "." + split + ".jsonl");
  return read_jsonl(path.string());
}

EncodedRecord encode_record(const Record& rec,
                            const std::vector<std::string>& domain_names,
                            int64_t max_seq) {
  EncodedRecord e;
  auto it = std::find(domain_names.begin(), domain_names.end(), rec.domain);
  if (it == domain_names.end())
    throw DataError(strfmt("record domain '%s' not in run's domain list",
                           rec.domain.c_str()));
  e.domain_id = static_cast<int32_t>(it - domain_names.begin());
  e.prompt = tokenize(rec.prompt);
  e.response = tokenize(rec.response);
  e.gold = rec.gold;
  if (e.prompt.empty() || e.response.empty())
    throw DataError("record with empty prompt or response");
  int64_t total = 3 + static_cast<int64_t>(e.prompt.size() + e.response.size());
  if (total > max_seq)
    throw DataError(strfmt("record needs %lld tokens but max_seq is %lld",
                           static_cast<long long>(total),
                           static_cast<long long>(max_seq)));
  return e;
}

std::vector<EncodedRecord> encode_records(
    const std::vector<Record>& recs,
    const std::vector<std::string>& domain_names, int64_t max_seq) {
  std::vector<EncodedRecord> out;
  out.reserve(recs.size());
  for (const auto& r : recs)
    out.push_back(encode_record(r, domain_names, max_seq));
  return out;
}

Batch make_batch(const std::vector<EncodedRecord>& recs, MaskMode mode) {
  if (recs.empty()) throw UsageError("make_batch: empty record list");
  int64_t B = static_cast<int64_t>(recs.size());
  int64_t T = 0;
  for (const auto& r : recs)
    T = std::max(T, static_cast<int64_t>(3 + r.prompt.size() + r.response.size()));
  Batch batch;
  batch.tokens = IntMat(B, T, kPad);
  batch.targets = IntMat(B, T, -1);
  batch.loss_mask = IntMat(B, T, 0);
  batch.lengths.resize(B);
  batch.prompt_lengths.resize(B);
  batch.labels.resize(B);
  for (int64_t b = 0; b < B; b++) {
    const auto& r = recs[b];
    std::vector<int32_t> seq;
    seq.reserve(3 + r.prompt.size() + r.response.size());
    seq.push_back(kBos);
    seq.insert(seq.end(), r.prompt.begin(), r.prompt.end());
    seq.push_back(kSep);
    seq.insert(seq.end(), r.response.begin(), r.response.end());
    seq.push_back(kEos);
    int64_t L = static_cast<int64_t>(seq.size());
    int64_t plen = static_cast<int64_t>(r.prompt.size()) + 2;
    for (int64_t t = 0; t < L; t++) batch.tokens.at(b, t) = seq[t];
    int64_t first = mode == MaskMode::kFullSequence ? 1 : plen;
    for (int64_t t = first; t < L; t++) batch.loss_mask.at(b, t) = 1;
    for (int64_t t = 0; t + 1 < L; t++)
      if (batch.loss_mask.at(b, t + 1)) batch.targets.at(b, t) = seq[t + 1];
    batch.lengths[b] = L;
    batch.prompt_lengths[b] = plen;
    batch.labels[b] = r.domain_id;
  }
  return batch;
}

std::vector<std::vector<int64_t>> single_domain_schedule(int64_t n,
                                                         int64_t batch_size,
                                                         uint64_t seed) {
  if (batch_size < 1) throw UsageError("batch_size must be >= 1");
  if (n < 1) throw UsageError("empty dataset");
  std::vector<int64_t> order(n);
  for (int64_t i = 0; i < n; i++) order[i] = i;
  Rng rng = Rng::fork(seed, "epoch");
  shuffle_vec(order, rng);
  std::vector<std::vector<int64_t>> batches;
  for (int64_t i = 0; i < n; i += batch_size) {
    auto end = std::min(n, i + batch_size);
    batches.emplace_back(order.begin() + i, order.begin() + end);
  }
  return batches;
}

std::vector<std::vector<std::pair<int32_t, int64_t>>> even_sample_schedule(
    const std::vector<int64_t>& sizes, int64_t batch_size, uint64_t seed) {
  if (batch_size < 1) throw UsageError("batch_size must be >= 1");
  if (sizes.empty()) throw UsageError("no domains");
  int64_t m = sizes[0];
  for (int64_t s : sizes) {
    if (s < 1) throw UsageError("empty domain dataset");
    m = std::min(m, s);
  }
  int32_t nd = static_cast<int32_t>(sizes.size());
  // Each domain contributes exactly m records per epoch; the identity
  // stream is globally shuffled so batch composition is random.
  std::vector<int32_t> stream;
  stream.reserve(m * nd);
  for (int32_t d = 0; d < nd; d++)
    for (int64_t i = 0; i < m; i++) stream.push_back(d);
  Rng mix = Rng::fork(seed, "mix");
  shuffle_vec(stream, mix);
  std::vector<std::vector<int64_t>> order(nd);
  for (int32_t d = 0; d < nd; d++) {
    order[d].resize(sizes[d]);
    for (int64_t i = 0; i < sizes[d]; i++) order[d][i] = i;
    Rng r = Rng::fork(seed, strfmt("domain%d", d));
    shuffle_vec(order[d], r);
  }
  std::vector<int64_t> cursor(nd, 0);
  std::vector<std::vector<std::pair<int32_t, int64_t>>> batches;
  int64_t total = static_cast<int64_t>(stream.size());
  for (int64_t i = 0; i < total; i += batch_size) {
    std::vector<std::pair<int32_t, int64_t>> b;
    for (int64_t j = i; j < std::min(total, i + batch_size); j++) {
      int32_t d = stream[j];
      b.emplace_back(d, order[d][cursor[d]++]);
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

Batch gather_batch(const std::vector<std::vector<EncodedRecord>>& domains,
                   const std::vector<std::pair<int32_t, int64_t>>& picks,
                   MaskMode mode) {
  std::vector<EncodedRecord> recs;
  recs.reserve(picks.size());
  for (auto [d, i] : picks) recs.push_back(domains.at(d).at(i));
  return make_batch(recs, mode);
}

}  // namespace moa::data
