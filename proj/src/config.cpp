#include "moa/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "moa/common.hpp"

namespace moa::cfg {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

// shortest decimal that parses back to the same double
std::string fmt_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, p);
}

double parse_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  double d = std::strtod(v.c_str(), &end);
  if (end != v.c_str() + v.size() || v.empty())
    throw UsageError(strfmt("%s: '%s' is not a number", key.c_str(), v.c_str()));
  return d;
}

int64_t parse_int(const std::string& key, const std::string& v) {
  int64_t n = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), n);
  if (ec != std::errc() || p != v.data() + v.size())
    throw UsageError(
        strfmt("%s: '%s' is not an integer", key.c_str(), v.c_str()));
  return n;
}

uint64_t parse_uint(const std::string& key, const std::string& v) {
  uint64_t n = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), n);
  if (ec != std::errc() || p != v.data() + v.size())
    throw UsageError(
        strfmt("%s: '%s' is not an unsigned integer", key.c_str(), v.c_str()));
  return n;
}

bool parse_flag(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw UsageError(strfmt("%s: '%s' is not a boolean", key.c_str(), v.c_str()));
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream ss(s);
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string domains_csv(const std::vector<data::DomainSpec>& specs) {
  std::string out;
  for (const auto& s : specs) {
    if (!out.empty()) out += ",";
    out += s.name + ":" + s.archetype;
  }
  return out;
}

std::vector<data::DomainSpec> parse_domains(const std::string& csv) {
  std::vector<data::DomainSpec> out;
  for (const std::string& item : split_csv(csv)) {
    size_t colon = item.find(':');
    if (colon == std::string::npos || colon == 0 || colon == item.size() - 1)
      throw UsageError(
          strfmt("data.domains: '%s' is not name:archetype", item.c_str()));
    data::DomainSpec spec;
    spec.name = trim(item.substr(0, colon));
    spec.archetype = trim(item.substr(colon + 1));
    for (const auto& prev : out)
      if (prev.name == spec.name)
        throw UsageError(
            strfmt("data.domains: duplicate name '%s'", spec.name.c_str()));
    out.push_back(std::move(spec));
  }
  if (out.empty()) throw UsageError("data.domains: empty list");
  return out;
}

struct KeyDef {
  const char* name;
  std::string (*get)(const RunConfig&);
  void (*set)(RunConfig&, const std::string&);
};

// One table drives parsing, overriding, and dumping, so the three can never
// drift apart.
const std::vector<KeyDef>& registry() {
  static const std::vector<KeyDef> defs = {
      {"model.num_layers",
       [](const RunConfig& c) { return std::to_string(c.model.num_layers); },
       [](RunConfig& c, const std::string& v) {
         c.model.num_layers = parse_int("model.num_layers", v);
       }},
      {"model.hidden_dim",
       [](const RunConfig& c) { return std::to_string(c.model.hidden_dim); },
       [](RunConfig& c, const std::string& v) {
         c.model.hidden_dim = parse_int("model.hidden_dim", v);
       }},
      {"model.num_heads",
       [](const RunConfig& c) { return std::to_string(c.model.num_heads); },
       [](RunConfig& c, const std::string& v) {
         c.model.num_heads = parse_int("model.num_heads", v);
       }},
      {"model.ffn_dim",
       [](const RunConfig& c) { return std::to_string(c.model.ffn_dim); },
       [](RunConfig& c, const std::string& v) {
         c.model.ffn_dim = parse_int("model.ffn_dim", v);
       }},
      {"model.vocab_size",
       [](const RunConfig& c) { return std::to_string(c.model.vocab_size); },
       [](RunConfig& c, const std::string& v) {
         c.model.vocab_size = parse_int("model.vocab_size", v);
       }},
      {"model.max_seq_len",
       [](const RunConfig& c) { return std::to_string(c.model.max_seq_len); },
       [](RunConfig& c, const std::string& v) {
         c.model.max_seq_len = parse_int("model.max_seq_len", v);
       }},
      {"model.rope_enabled",
       [](const RunConfig& c) {
         return std::string(c.model.rope_enabled ? "true" : "false");
       },
       [](RunConfig& c, const std::string& v) {
         c.model.rope_enabled = parse_flag("model.rope_enabled", v);
       }},
      {"train.peak_lr",
       [](const RunConfig& c) { return fmt_double(c.train.peak_lr); },
       [](RunConfig& c, const std::string& v) {
         c.train.peak_lr = parse_double("train.peak_lr", v);
       }},
      {"train.total_steps",
       [](const RunConfig& c) { return std::to_string(c.train.total_steps); },
       [](RunConfig& c, const std::string& v) {
         c.train.total_steps = parse_int("train.total_steps", v);
       }},
      {"train.warmup_fraction",
       [](const RunConfig& c) { return fmt_double(c.train.warmup_fraction); },
       [](RunConfig& c, const std::string& v) {
         c.train.warmup_fraction = parse_double("train.warmup_fraction", v);
       }},
      {"train.clip_norm",
       [](const RunConfig& c) { return fmt_double(c.train.clip_norm); },
       [](RunConfig& c, const std::string& v) {
         c.train.clip_norm = parse_double("train.clip_norm", v);
       }},
      {"train.accum_steps",
       [](const RunConfig& c) { return std::to_string(c.train.accum_steps); },
       [](RunConfig& c, const std::string& v) {
         c.train.accum_steps = parse_int("train.accum_steps", v);
       }},
      {"train.batch_size",
       [](const RunConfig& c) { return std::to_string(c.train.batch_size); },
       [](RunConfig& c, const std::string& v) {
         c.train.batch_size = parse_int("train.batch_size", v);
       }},
      {"train.eta",
       [](const RunConfig& c) { return fmt_double(c.train.eta); },
       [](RunConfig& c, const std::string& v) {
         c.train.eta = parse_double("train.eta", v);
       }},
      {"train.weight_decay",
       [](const RunConfig& c) { return fmt_double(c.train.weight_decay); },
       [](RunConfig& c, const std::string& v) {
         c.train.weight_decay = parse_double("train.weight_decay", v);
       }},
      {"train.seed",
       [](const RunConfig& c) { return std::to_string(c.train.seed); },
       [](RunConfig& c, const std::string& v) {
         c.train.seed = parse_uint("train.seed", v);
       }},
      {"train.loss_mask",
       [](const RunConfig& c) {
         return std::string(mask_name(c.train.loss_mask_mode));
       },
       [](RunConfig& c, const std::string& v) {
         c.train.loss_mask_mode = parse_mask(v);
       }},
      {"train.eval_interval",
       [](const RunConfig& c) { return std::to_string(c.train.eval_interval); },
       [](RunConfig& c, const std::string& v) {
         c.train.eval_interval = parse_int("train.eval_interval", v);
       }},
      {"train.metrics_path",
       [](const RunConfig& c) { return c.train.metrics_path; },
       [](RunConfig& c, const std::string& v) { c.train.metrics_path = v; }},
      {"warmup.steps",
       [](const RunConfig& c) { return std::to_string(c.warmup_steps); },
       [](RunConfig& c, const std::string& v) {
         c.warmup_steps = parse_int("warmup.steps", v);
       }},
      {"adapter.rank",
       [](const RunConfig& c) { return std::to_string(c.adapter.rank); },
       [](RunConfig& c, const std::string& v) {
         c.adapter.rank = parse_int("adapter.rank", v);
       }},
      {"adapter.scale",
       [](const RunConfig& c) { return fmt_double(c.adapter.scale); },
       [](RunConfig& c, const std::string& v) {
         c.adapter.scale = parse_double("adapter.scale", v);
       }},
      {"adapter.mlp_hidden",
       [](const RunConfig& c) { return std::to_string(c.adapter.mlp_hidden); },
       [](RunConfig& c, const std::string& v) {
         c.adapter.mlp_hidden = parse_int("adapter.mlp_hidden", v);
       }},
      {"adapter.slots",
       [](const RunConfig& c) { return slots_csv(c.adapter.slots); },
       [](RunConfig& c, const std::string& v) {
         c.adapter.slots = parse_slots(v);
       }},
      {"adapter.cls_embed",
       [](const RunConfig& c) { return std::to_string(c.adapter.cls_embed); },
       [](RunConfig& c, const std::string& v) {
         c.adapter.cls_embed = parse_int("adapter.cls_embed", v);
       }},
      {"data.dir", [](const RunConfig& c) { return c.data_dir; },
       [](RunConfig& c, const std::string& v) { c.data_dir = v; }},
      {"data.domains",
       [](const RunConfig& c) { return domains_csv(c.domains); },
       [](RunConfig& c, const std::string& v) { c.domains = parse_domains(v); }},
      {"data.n_train",
       [](const RunConfig& c) { return std::to_string(c.n_train); },
       [](RunConfig& c, const std::string& v) {
         c.n_train = parse_int("data.n_train", v);
       }},
      {"data.n_val", [](const RunConfig& c) { return std::to_string(c.n_val); },
       [](RunConfig& c, const std::string& v) {
         c.n_val = parse_int("data.n_val", v);
       }},
      {"data.n_test",
       [](const RunConfig& c) { return std::to_string(c.n_test); },
       [](RunConfig& c, const std::string& v) {
         c.n_test = parse_int("data.n_test", v);
       }},
      {"data.seed", [](const RunConfig& c) { return std::to_string(c.data_seed); },
       [](RunConfig& c, const std::string& v) {
         c.data_seed = parse_uint("data.seed", v);
       }},
      {"select.strategy",
       [](const RunConfig& c) { return std::string(strategy_name(c.strategy)); },
       [](RunConfig& c, const std::string& v) { c.strategy = parse_strategy(v); }},
      {"select.max_new_tokens",
       [](const RunConfig& c) { return std::to_string(c.max_new_tokens); },
       [](RunConfig& c, const std::string& v) {
         c.max_new_tokens = parse_int("select.max_new_tokens", v);
       }},
  };
  return defs;
}

}  // namespace

RunConfig default_run_config() {
  RunConfig rc;
  rc.model.num_layers = 2;
  rc.model.hidden_dim = 64;
  rc.model.num_heads = 4;
  rc.model.ffn_dim = 256;
  rc.model.vocab_size = data::kVocabSize;  // byte ids plus the specials
  rc.model.max_seq_len = 256;
  rc.domains = data::default_domains();
  return rc;
}

void set_key(RunConfig& rc, const std::string& key, const std::string& value) {
  for (const KeyDef& def : registry()) {
    if (key == def.name) {
      def.set(rc, value);
      return;
    }
  }
  throw UsageError(strfmt("unknown config key '%s'", key.c_str()));
}

RunConfig parse_config(const std::string& text) {
  RunConfig rc = default_run_config();
  std::istringstream ss(text);
  std::string line;
  int64_t lineno = 0;
  while (std::getline(ss, line)) {
    lineno++;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw UsageError(
          strfmt("config line %lld: expected key = value", (long long)lineno));
    try {
      set_key(rc, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    } catch (const UsageError& e) {
      throw UsageError(
          strfmt("config line %lld: %s", (long long)lineno, e.what()));
    }
  }
  return rc;
}

RunConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError(strfmt("cannot read config file %s", path.c_str()));
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string dump_config(const RunConfig& rc) {
  std::string out;
  for (const KeyDef& def : registry())
    out += strfmt("%s = %s\n", def.name, def.get(rc).c_str());
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const KeyDef& def : registry()) keys.push_back(def.name);
  return keys;
}

const char* strategy_name(SelectKind kind) {
  switch (kind) {
    case SelectKind::kOracle: return "oracle";
    case SelectKind::kVote: return "vote";
    case SelectKind::kLast: return "last";
  }
  return "vote";
}

SelectKind parse_strategy(const std::string& name) {
  if (name == "oracle") return SelectKind::kOracle;
  if (name == "vote") return SelectKind::kVote;
  if (name == "last") return SelectKind::kLast;
  throw UsageError(
      strfmt("unknown strategy '%s' (oracle|vote|last)", name.c_str()));
}

const char* mask_name(data::MaskMode mode) {
  return mode == data::MaskMode::kFullSequence ? "full" : "response";
}

data::MaskMode parse_mask(const std::string& name) {
  if (name == "full") return data::MaskMode::kFullSequence;
  if (name == "response") return data::MaskMode::kResponseOnly;
  throw UsageError(
      strfmt("unknown loss mask '%s' (full|response)", name.c_str()));
}

std::string slots_csv(const std::vector<MatrixSlot>& slots) {
  if (slots.empty()) return "all";
  std::string out;
  for (MatrixSlot s : slots) {
    if (!out.empty()) out += ",";
    out += slot_name(s);
  }
  return out;
}

std::vector<MatrixSlot> parse_slots(const std::string& csv) {
  if (trim(csv) == "all") return {};
  std::vector<MatrixSlot> out;
  for (const std::string& item : split_csv(csv)) {
    bool found = false;
    for (MatrixSlot s : all_slots()) {
      if (item == slot_name(s)) {
        for (MatrixSlot prev : out)
          if (prev == s)
            throw UsageError(
                strfmt("adapter.slots: duplicate '%s'", item.c_str()));
        out.push_back(s);
        found = true;
        break;
      }
    }
    if (!found)
      throw UsageError(strfmt("adapter.slots: unknown slot '%s'", item.c_str()));
  }
  if (out.empty()) throw UsageError("adapter.slots: empty list");
  return out;
}

}  // namespace moa::cfg
