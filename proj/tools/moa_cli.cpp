#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "moa/checkpoint.hpp"
#include "moa/common.hpp"
#include "moa/config.hpp"
#include "moa/data.hpp"
#include "moa/eval.hpp"
#include "moa/train.hpp"

using namespace moa;
namespace fs = std::filesystem;

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

// --config file first, then --set overrides in order
cfg::RunConfig resolve_config(const std::string& config_path,
                              const std::vector<std::string>& sets) {
  cfg::RunConfig rc = config_path.empty() ? cfg::default_run_config()
                                          : cfg::load_config_file(config_path);
  for (const std::string& kv : sets) {
    size_t eq = kv.find('=');
    if (eq == std::string::npos)
      throw UsageError(strfmt("--set expects key=value, got '%s'", kv.c_str()));
    cfg::set_key(rc, trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
  }
  return rc;
}

std::vector<std::string> domain_names(const cfg::RunConfig& rc) {
  std::vector<std::string> names;
  for (const auto& d : rc.domains) names.push_back(d.name);
  return names;
}

std::vector<DomainData> load_domains(const cfg::RunConfig& rc) {
  auto names = domain_names(rc);
  std::vector<DomainData> out;
  for (const auto& spec : rc.domains) {
    DomainData d;
    d.train = data::encode_records(
        data::read_split(rc.data_dir, spec.name, "train"), names,
        rc.model.max_seq_len);
    d.val = data::encode_records(data::read_split(rc.data_dir, spec.name, "val"),
                                 names, rc.model.max_seq_len);
    out.push_back(std::move(d));
  }
  return out;
}

void write_text_atomic(const std::string& path, const std::string& text) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw UsageError(strfmt("cannot write %s", path.c_str()));
    out.write(text.data(), std::streamsize(text.size()));
    out.flush();
    if (!out) {
      fs::remove(tmp);
      throw UsageError(strfmt("cannot write %s", path.c_str()));
    }
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp);
    throw UsageError(strfmt("cannot move %s into place: %s", path.c_str(),
                            ec.message().c_str()));
  }
}

// ------------------------------------------------- checkpoint info plumbing

nlohmann::ordered_json model_config_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["num_layers"] = c.num_layers;
  j["hidden_dim"] = c.hidden_dim;
  j["num_heads"] = c.num_heads;
  j["ffn_dim"] = c.ffn_dim;
  j["vocab_size"] = c.vocab_size;
  j["max_seq_len"] = c.max_seq_len;
  j["rope_enabled"] = c.rope_enabled;
  return j;
}

ModelConfig model_config_from_json(const nlohmann::ordered_json& j) {
  ModelConfig c;
  try {
    c.num_layers = j.at("num_layers").get<int64_t>();
    c.hidden_dim = j.at("hidden_dim").get<int64_t>();
    c.num_heads = j.at("num_heads").get<int64_t>();
    c.ffn_dim = j.at("ffn_dim").get<int64_t>();
    c.vocab_size = j.at("vocab_size").get<int64_t>();
    c.max_seq_len = j.at("max_seq_len").get<int64_t>();
    c.rope_enabled = j.at("rope_enabled").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(strfmt("checkpoint model config is incomplete: %s", e.what()));
  }
  return c;
}

std::string domains_csv(const cfg::RunConfig& rc) {
  std::string out;
  for (const auto& d : rc.domains) {
    if (!out.empty()) out += ",";
    out += d.name + ":" + d.archetype;
  }
  return out;
}

nlohmann::ordered_json run_info(const cfg::RunConfig& rc, const char* kind,
                                int stage, int64_t n_experts) {
  nlohmann::ordered_json info;
  info["kind"] = kind;
  info["stage"] = stage;
  info["seed"] = rc.train.seed;
  info["step"] = rc.train.total_steps;
  info["tokenizer"] = "byte-v1";
  info["eta"] = rc.train.eta;
  info["n_experts"] = n_experts;
  nlohmann::ordered_json adapter;
  adapter["rank"] = rc.adapter.rank;
  adapter["scale"] = rc.adapter.scale;
  adapter["mlp_hidden"] = rc.adapter.mlp_hidden;
  adapter["slots"] = cfg::slots_csv(rc.adapter.slots);
  adapter["cls_embed"] = rc.adapter.cls_embed;
  info["adapter"] = std::move(adapter);
  info["model_config"] = model_config_json(rc.model);
  info["domains"] = domains_csv(rc);
  info["strategy"] = cfg::strategy_name(rc.strategy);
  info["config"] = cfg::dump_config(rc);  // full provenance
  return info;
}

std::vector<std::pair<std::string, TensorPtr>> cat_tensors(
    std::vector<std::pair<std::string, TensorPtr>> a,
    const std::vector<std::pair<std::string, TensorPtr>>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

BaseModel base_from_checkpoint(const ckpt::Checkpoint& ck) {
  if (!ck.info.contains("model_config"))
    throw DataError("checkpoint has no model config");
  BaseModel base = init_base(model_config_from_json(ck.info["model_config"]), 1);
  ckpt::attach_tensors(ck, base.named_tensors());
  return base;
}

// Rebuilds a full stage-2 model from its own metadata, then attaches every
// tensor by name.
MoaModel model_from_checkpoint(const ckpt::Checkpoint& ck) {
  if (ck.info.value("kind", std::string()) != "moa")
    throw UsageError("this command needs a stage-2 'moa' checkpoint");
  int64_t n_experts = 0;
  AdapterSpec spec;
  double eta = 0.1;
  try {
    n_experts = ck.info.at("n_experts").get<int64_t>();
    eta = ck.info.at("eta").get<double>();
    const auto& a = ck.info.at("adapter");
    spec.rank = a.at("rank").get<int64_t>();
    spec.scale = a.at("scale").get<double>();
    spec.mlp_hidden = a.at("mlp_hidden").get<int64_t>();
    spec.slots = cfg::parse_slots(a.at("slots").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(strfmt("checkpoint metadata is incomplete: %s", e.what()));
  }
  ModelConfig mc = model_config_from_json(ck.info.at("model_config"));
  MoaModel model = make_moa(init_base(mc, 1), n_experts, spec.rank, spec.scale,
                            eta, spec.mlp_hidden, spec.resolved_slots(), 1);
  ckpt::attach_tensors(
      ck, cat_tensors(model.base.named_tensors(), model.adapter_tensors()));
  return model;
}

cfg::RunConfig config_for_eval(const ckpt::Checkpoint& ck,
                               const cfg::RunConfig& local) {
  // model and domain identity come from the artifact; data location and
  // selection settings stay local
  cfg::RunConfig rc = local;
  rc.model = model_config_from_json(ck.info.at("model_config"));
  if (ck.info.contains("domains")) {
    cfg::RunConfig probe = cfg::default_run_config();
    cfg::set_key(probe, "data.domains", ck.info["domains"].get<std::string>());
    rc.domains = probe.domains;
  }
  return rc;
}

// Shared base for steps that need one: loaded from a checkpoint when given,
// otherwise warmed up from scratch (deterministic in the config).
BaseModel obtain_base(const cfg::RunConfig& rc, const std::string& base_path,
                      const std::vector<DomainData>& domains) {
  if (!base_path.empty())
    return base_from_checkpoint(ckpt::load_checkpoint(base_path));
  BaseModel base = init_base(rc.model, rc.train.seed);
  TrainConfig warm = rc.train;
  warm.total_steps = rc.warmup_steps;
  warm.metrics_path.clear();
  std::cout << "warming up the base model for " << warm.total_steps
            << " steps\n";
  warmup_base(base, domains, warm);
  return base;
}

int32_t domain_index(const cfg::RunConfig& rc, const std::string& name) {
  for (size_t i = 0; i < rc.domains.size(); i++)
    if (rc.domains[i].name == name) return int32_t(i);
  throw UsageError(strfmt("unknown domain '%s' (have: %s)", name.c_str(),
                          domains_csv(rc).c_str()));
}

std::string read_stdin() {
  std::ostringstream ss;
  ss << std::cin.rdbuf();
  return ss.str();
}

// ------------------------------------------------------------------ commands

void cmd_gen_corpus(const cfg::RunConfig& rc, const std::string& out_dir) {
  if (fs::exists(out_dir))
    throw UsageError(strfmt("output directory %s already exists", out_dir.c_str()));
  const std::string tmp = out_dir + ".tmp";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  data::gen_corpus(rc.domains, tmp, int(rc.n_train), int(rc.n_val),
                   int(rc.n_test), rc.data_seed);
  std::error_code ec;
  fs::rename(tmp, out_dir, ec);
  if (ec)
    throw UsageError(strfmt("cannot move %s into place: %s", out_dir.c_str(),
                            ec.message().c_str()));
  std::cout << "wrote " << rc.domains.size() << " domains x "
            << (rc.n_train + rc.n_val + rc.n_test) << " records under "
            << out_dir << "\n";
}

void cmd_train_expert(const cfg::RunConfig& rc, const std::string& domain,
                      const std::string& base_path, const std::string& out_path) {
  int32_t id = domain_index(rc, domain);
  auto domains = load_domains(rc);
  BaseModel base = obtain_base(rc, base_path, domains);
  ExpertTrainResult result =
      train_expert(base, id, domains[size_t(id)], rc.adapter, rc.train);
  nlohmann::ordered_json info = run_info(rc, "expert", 1, 1);
  info["domain_id"] = id;
  info["domain"] = domain;
  ckpt::save_checkpoint(
      out_path,
      cat_tensors(base.named_tensors(), result.expert.named_tensors()), info);
  std::cout << "trained expert '" << domain << "' (id " << id << ") for "
            << rc.train.total_steps << " steps; final loss "
            << strfmt("%.4f", result.loss_curve.back()) << "\nsaved "
            << out_path << "\n";
}

void cmd_train_moa(const cfg::RunConfig& rc,
                   const std::vector<std::string>& expert_paths,
                   const std::string& base_path, const std::string& out_path) {
  auto domains = load_domains(rc);
  const int64_t n = int64_t(domains.size());
  if (n < 2) throw UsageError("joint training needs at least two domains");

  BaseModel base =
      (base_path.empty() && !expert_paths.empty())
          ? base_from_checkpoint(ckpt::load_checkpoint(expert_paths[0]))
          : obtain_base(rc, base_path, domains);

  std::vector<LoraExpert> experts;
  if (expert_paths.empty()) {
    for (int32_t id = 0; id < n; id++) {
      std::cout << "stage 1: training expert '" << rc.domains[size_t(id)].name
                << "' (" << (id + 1) << "/" << n << ")\n";
      experts.push_back(
          train_expert(base, id, domains[size_t(id)], rc.adapter, rc.train)
              .expert);
    }
  } else {
    if (int64_t(expert_paths.size()) != n)
      throw UsageError(strfmt("need %lld expert checkpoints, got %zu",
                              (long long)n, expert_paths.size()));
    for (int32_t id = 0; id < n; id++)
      experts.push_back(make_expert(base.config, id, rc.adapter.rank,
                                    rc.adapter.scale,
                                    rc.adapter.resolved_slots(), 0));
    std::vector<bool> seen(size_t(n), false);
    for (const std::string& path : expert_paths) {
      ckpt::Checkpoint ck = ckpt::load_checkpoint(path);
      int64_t id = -1;
      try {
        id = ck.info.at("domain_id").get<int64_t>();
      } catch (const nlohmann::json::exception&) {
        throw DataError(strfmt("%s is not an expert checkpoint", path.c_str()));
      }
      if (id < 0 || id >= n)
        throw DataError(strfmt("%s holds expert %lld, outside this run's %lld domains",
                               path.c_str(), (long long)id, (long long)n));
      if (seen[size_t(id)])
        throw UsageError(strfmt("expert %lld supplied twice", (long long)id));
      seen[size_t(id)] = true;
      ckpt::attach_tensors(ck, experts[size_t(id)].named_tensors(),
                           strfmt("expert.%lld.", (long long)id));
    }
  }

  std::cout << "stage 2: joint router + expert training\n";
  MoaTrainResult result =
      train_moa(std::move(base), std::move(experts), domains, rc.adapter, rc.train);
  ckpt::save_checkpoint(out_path,
                        cat_tensors(result.model.base.named_tensors(),
                                    result.model.adapter_tensors()),
                        run_info(rc, "moa", 2, n));
  std::cout << "final objective " << strfmt("%.4f", result.loss_curve.back())
            << " (lm " << strfmt("%.4f", result.lm_curve.back()) << ", routing "
            << strfmt("%.4f", result.cls_curve.back()) << ")\nsaved "
            << out_path << "\n";
}

BaselineKind parse_baseline(const std::string& name) {
  if (name == "single_mixed") return BaselineKind::kSingleMixed;
  if (name == "moe") return BaselineKind::kMoeLora;
  if (name == "moe_naive") return BaselineKind::kMoeLoraNaive;
  if (name == "classifier") return BaselineKind::kClassifier;
  throw UsageError(strfmt(
      "unknown baseline '%s' (single_mixed|moe|moe_naive|classifier)",
      name.c_str()));
}

void cmd_train_baseline(const cfg::RunConfig& rc, const std::string& kind_name,
                        const std::vector<std::string>& expert_paths,
                        const std::string& base_path, const std::string& out_path) {
  BaselineKind kind = parse_baseline(kind_name);
  auto domains = load_domains(rc);
  const int64_t n = int64_t(domains.size());
  BaseModel base =
      (base_path.empty() && !expert_paths.empty())
          ? base_from_checkpoint(ckpt::load_checkpoint(expert_paths[0]))
          : obtain_base(rc, base_path, domains);

  std::vector<LoraExpert> stage1;
  if (kind == BaselineKind::kMoeLora) {
    if (int64_t(expert_paths.size()) != n)
      throw UsageError(strfmt(
          "baseline 'moe' reuses stage-1 experts: need %lld checkpoints via --experts",
          (long long)n));
    for (int32_t id = 0; id < n; id++)
      stage1.push_back(make_expert(base.config, id, rc.adapter.rank,
                                   rc.adapter.scale,
                                   rc.adapter.resolved_slots(), 0));
    for (const std::string& path : expert_paths) {
      ckpt::Checkpoint ck = ckpt::load_checkpoint(path);
      int64_t id = ck.info.at("domain_id").get<int64_t>();
      if (id < 0 || id >= n)
        throw DataError(strfmt("%s holds expert %lld, outside this run's domains",
                               path.c_str(), (long long)id));
      ckpt::attach_tensors(ck, stage1[size_t(id)].named_tensors(),
                           strfmt("expert.%lld.", (long long)id));
    }
  }

  BaselineResult result =
      train_baseline(kind, base, stage1, domains, rc.adapter, rc.train);

  auto tensors = base.named_tensors();
  const char* kind_tag = "baseline-single_mixed";
  switch (kind) {
    case BaselineKind::kSingleMixed:
      tensors = cat_tensors(std::move(tensors), result.mixed.named_tensors());
      break;
    case BaselineKind::kMoeLora:
    case BaselineKind::kMoeLoraNaive:
      kind_tag = kind == BaselineKind::kMoeLora ? "baseline-moe"
                                                : "baseline-moe-naive";
      for (const auto& e : result.experts)
        tensors = cat_tensors(std::move(tensors), e.named_tensors());
      tensors = cat_tensors(std::move(tensors), result.gates.named_tensors());
      break;
    case BaselineKind::kClassifier:
      kind_tag = "baseline-classifier";
      tensors = result.classifier.named_tensors();  // standalone artifact
      break;
  }
  nlohmann::ordered_json info = run_info(rc, kind_tag, 1, n);
  ckpt::save_checkpoint(out_path, tensors, info);
  std::cout << "baseline '" << kind_name << "' done; final loss "
            << strfmt("%.4f", result.loss_curve.back()) << "\nsaved "
            << out_path << "\n";
}

void cmd_eval(const cfg::RunConfig& local, const std::string& ckpt_path,
              const std::string& split, const std::string& strategy,
              int64_t max_new, const std::string& mask,
              const std::string& json_out) {
  ckpt::Checkpoint ck = ckpt::load_checkpoint(ckpt_path);
  MoaModel model = model_from_checkpoint(ck);
  cfg::RunConfig rc = config_for_eval(ck, local);
  auto names = domain_names(rc);
  std::vector<std::vector<data::EncodedRecord>> tests;
  for (const auto& name : names)
    tests.push_back(data::encode_records(
        data::read_split(rc.data_dir, name, split), names,
        rc.model.max_seq_len));
  eval::EvalReport rep = eval::evaluate_moa(
      model, names, tests, cfg::parse_strategy(strategy), max_new,
      cfg::parse_mask(mask), rc.train.batch_size);
  std::cout << eval::report_table(rep);
  if (!json_out.empty()) {
    write_text_atomic(json_out, eval::report_json(rep) + "\n");
    std::cout << "report written to " << json_out << "\n";
  }
}

void cmd_infer(const std::string& ckpt_path, std::string prompt,
               const std::string& strategy, int64_t max_new, int32_t label) {
  MoaModel model = model_from_checkpoint(ckpt::load_checkpoint(ckpt_path));
  if (prompt.empty()) prompt = trim(read_stdin());
  if (prompt.empty()) throw UsageError("no prompt given (flag or stdin)");
  SelectKind kind = cfg::parse_strategy(strategy);
  if (kind == SelectKind::kOracle && label < 0)
    throw UsageError("--strategy oracle needs --label");
  eval::Generation gen =
      eval::generate(model, data::tokenize(prompt), kind, max_new, label);
  std::cout << data::detokenize(gen.tokens) << "\n";
  std::cout << "expert: " << gen.selection.expert << " (" << strategy << ")\n";
  if (!gen.selection.votes.empty()) {
    std::cout << "votes:";
    for (int32_t v : gen.selection.votes) std::cout << " " << v;
    std::cout << "\n";
  }
}

void cmd_inspect(const std::string& ckpt_path) {
  ckpt::Checkpoint ck = ckpt::inspect_checkpoint(ckpt_path);
  std::cout << ck.info.dump(2) << "\n";
  int64_t total = 0;
  for (const auto& e : ck.index) {
    int64_t numel = 1;
    std::string shape = "(";
    for (size_t i = 0; i < e.shape.size(); i++) {
      numel *= e.shape[i];
      shape += (i ? "," : "") + std::to_string(e.shape[i]);
    }
    shape += ")";
    total += numel;
    std::cout << strfmt("%-44s %-14s %10llu bytes\n", e.name.c_str(),
                        shape.c_str(), (unsigned long long)e.bytes);
  }
  std::cout << "tensors: " << ck.index.size() << "\n";
  std::cout << "parameters: " << total << "\n";
  if (ck.info.contains("model_config") && ck.info.contains("n_experts")) {
    const auto& mc = ck.info["model_config"];
    if (mc.contains("num_layers") && mc.contains("hidden_dim")) {
      int64_t mlp = 0;
      if (ck.info.contains("adapter"))
        mlp = ck.info["adapter"].value("mlp_hidden", int64_t(0));
      int64_t routers = count_router_params(
          mc["num_layers"].get<int64_t>(), mc["hidden_dim"].get<int64_t>(),
          ck.info["n_experts"].get<int64_t>(), mlp);
      std::cout << "router parameters: " << routers << "\n";
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mixture-of-LoRA-experts trainer and evaluator"};
  app.require_subcommand(1);

  // shared per-command config plumbing
  struct Common {
    std::string config_path;
    std::vector<std::string> sets;
  };
  auto add_common = [](CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config_path, "key=value config file");
    cmd->add_option("--set", c.sets, "override one config key (key=value)");
  };

  Common gen_c;
  std::string gen_out;
  uint64_t gen_seed = 0;
  auto* gen = app.add_subcommand("gen-corpus", "generate the synthetic datasets");
  add_common(gen, gen_c);
  gen->add_option("--out", gen_out, "dataset directory to create")->required();
  gen->add_option("--seed", gen_seed, "corpus seed (shorthand for data.seed)");
  gen->callback([&] {
    cfg::RunConfig rc = resolve_config(gen_c.config_path, gen_c.sets);
    if (gen->count("--seed") > 0) rc.data_seed = gen_seed;
    cmd_gen_corpus(rc, gen_out);
  });

  Common te_c;
  std::string te_domain, te_base, te_out, te_data, te_metrics;
  auto* te = app.add_subcommand("train-expert",
                                "stage 1: train one domain expert");
  add_common(te, te_c);
  te->add_option("--domain", te_domain, "domain name to train on")->required();
  te->add_option("--out", te_out, "checkpoint to write")->required();
  te->add_option("--base", te_base, "checkpoint holding the shared base");
  te->add_option("--data", te_data, "dataset directory (shorthand for data.dir)");
  te->add_option("--metrics", te_metrics, "metrics JSONL path");
  te->callback([&] {
    cfg::RunConfig rc = resolve_config(te_c.config_path, te_c.sets);
    if (!te_data.empty()) rc.data_dir = te_data;
    if (!te_metrics.empty()) rc.train.metrics_path = te_metrics;
    cmd_train_expert(rc, te_domain, te_base, te_out);
  });

  Common tm_c;
  std::string tm_base, tm_out, tm_data, tm_metrics;
  std::vector<std::string> tm_experts;
  auto* tm = app.add_subcommand(
      "train-moa", "stage 2: joint routers + experts (runs stage 1 if needed)");
  add_common(tm, tm_c);
  tm->add_option("--out", tm_out, "checkpoint to write")->required();
  tm->add_option("--base", tm_base, "checkpoint holding the shared base");
  tm->add_option("--experts", tm_experts,
                 "stage-1 expert checkpoints (one per domain)");
  tm->add_option("--data", tm_data, "dataset directory");
  tm->add_option("--metrics", tm_metrics, "metrics JSONL path");
  tm->callback([&] {
    cfg::RunConfig rc = resolve_config(tm_c.config_path, tm_c.sets);
    if (!tm_data.empty()) rc.data_dir = tm_data;
    if (!tm_metrics.empty()) rc.train.metrics_path = tm_metrics;
    cmd_train_moa(rc, tm_experts, tm_base, tm_out);
  });

  Common tb_c;
  std::string tb_kind, tb_base, tb_out, tb_data, tb_metrics;
  std::vector<std::string> tb_experts;
  auto* tb = app.add_subcommand("train-baseline",
                                "train a comparison baseline");
  add_common(tb, tb_c);
  tb->add_option("--kind", tb_kind,
                 "single_mixed | moe | moe_naive | classifier")
      ->required();
  tb->add_option("--out", tb_out, "checkpoint to write")->required();
  tb->add_option("--base", tb_base, "checkpoint holding the shared base");
  tb->add_option("--experts", tb_experts,
                 "stage-1 expert checkpoints (for --kind moe)");
  tb->add_option("--data", tb_data, "dataset directory");
  tb->add_option("--metrics", tb_metrics, "metrics JSONL path");
  tb->callback([&] {
    cfg::RunConfig rc = resolve_config(tb_c.config_path, tb_c.sets);
    if (!tb_data.empty()) rc.data_dir = tb_data;
    if (!tb_metrics.empty()) rc.train.metrics_path = tb_metrics;
    cmd_train_baseline(rc, tb_kind, tb_experts, tb_base, tb_out);
  });

  Common ev_c;
  std::string ev_ckpt, ev_split = "test", ev_strategy = "vote",
              ev_mask = "response", ev_json, ev_data;
  int64_t ev_max_new = 64;
  auto* ev = app.add_subcommand("eval", "score a stage-2 checkpoint");
  add_common(ev, ev_c);
  ev->add_option("--ckpt", ev_ckpt, "stage-2 checkpoint")->required();
  ev->add_option("--split", ev_split, "dataset split (train|val|test)");
  ev->add_option("--strategy", ev_strategy, "oracle | vote | last");
  ev->add_option("--mask", ev_mask, "perplexity mask: full | response");
  ev->add_option("--max-new", ev_max_new, "generation budget per prompt");
  ev->add_option("--json", ev_json, "also write the report as JSON here");
  ev->add_option("--data", ev_data, "dataset directory");
  ev->callback([&] {
    cfg::RunConfig rc = resolve_config(ev_c.config_path, ev_c.sets);
    if (!ev_data.empty()) rc.data_dir = ev_data;
    cmd_eval(rc, ev_ckpt, ev_split, ev_strategy, ev_max_new, ev_mask, ev_json);
  });

  std::string in_ckpt, in_prompt, in_strategy = "vote";
  int64_t in_max_new = 64;
  int32_t in_label = -1;
  auto* inf = app.add_subcommand("infer", "generate a continuation");
  inf->add_option("--ckpt", in_ckpt, "stage-2 checkpoint")->required();
  inf->add_option("--prompt", in_prompt, "prompt text (stdin when omitted)");
  inf->add_option("--strategy", in_strategy, "oracle | vote | last");
  inf->add_option("--max-new", in_max_new, "generation budget");
  inf->add_option("--label", in_label, "domain id for --strategy oracle");
  inf->callback(
      [&] { cmd_infer(in_ckpt, in_prompt, in_strategy, in_max_new, in_label); });

  std::string is_ckpt;
  auto* is = app.add_subcommand("inspect",
                                "print checkpoint metadata and tensor index");
  is->add_option("--ckpt", is_ckpt, "checkpoint to inspect")->required();
  is->callback([&] { cmd_inspect(is_ckpt); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
