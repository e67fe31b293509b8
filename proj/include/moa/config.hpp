#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moa/adapters.hpp"
#include "moa/data.hpp"
#include "moa/train.hpp"

namespace moa::cfg {

// Every knob of a run as one flat key=value document. Defaults are chosen
// for the desk-scale synthetic suite; any subset can be overridden from a
// config file and again from command-line --set flags.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  int64_t warmup_steps = 200;  // full-parameter warm-up before stage 1
  AdapterSpec adapter;
  std::string data_dir = "data";
  std::vector<data::DomainSpec> domains;  // defaults to the six built-ins
  int64_t n_train = 200;
  int64_t n_val = 50;
  int64_t n_test = 50;
  uint64_t data_seed = 7;
  SelectKind strategy = SelectKind::kVote;
  int64_t max_new_tokens = 64;
};

RunConfig default_run_config();

// Applies one key=value override. Unknown keys and unparsable values throw.
void set_key(RunConfig& rc, const std::string& key, const std::string& value);

// Defaults plus the overrides in `text`: one "key = value" per line, '#'
// starts a full-line comment, blank lines are skipped.
RunConfig parse_config(const std::string& text);
RunConfig load_config_file(const std::string& path);

// The fully-resolved document: every key, in registry order. Parsing the
// dump reproduces the config exactly.
std::string dump_config(const RunConfig& rc);

std::vector<std::string> config_keys();

// enum <-> text helpers shared with the command-line surface
const char* strategy_name(SelectKind kind);
SelectKind parse_strategy(const std::string& name);
const char* mask_name(data::MaskMode mode);
data::MaskMode parse_mask(const std::string& name);
std::string slots_csv(const std::vector<MatrixSlot>& slots);  // "all" if empty
std::vector<MatrixSlot> parse_slots(const std::string& csv);

}  // namespace moa::cfg
