#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "mv2mae/synthdata.hpp"
#include "mv2mae/training.hpp"

namespace mv2mae::cli {

/// Everything a command needs, resolved as defaults < config file < flags.
struct RunConfig {
  std::string command;
  std::string preset = "small";
  TrainConfig train;
  EvalConfig eval;
  /// Model clip geometry; 0 takes the dataset's value.
  std::size_t clip_frames = 0;
  std::size_t clip_size = 0;

  // gen-data
  std::size_t samples = 200;
  std::size_t views = 2;
  std::size_t classes = synth::kNumMotionClasses;
  std::size_t size = 64;
  std::size_t frames = 16;
  std::string out = "data.mv2d";

  std::string data;
  std::string checkpoint;
  std::string out_dir = "run";
  std::string resume;

  // viz
  std::string kind = "motion-weights";
  std::size_t sample = 0;
  std::size_t view = 0;
  std::size_t layer = 0;
  std::size_t head = 0;
  std::size_t query = 0;
  std::vector<double> temperatures{60};
  std::uint64_t mask_epoch = 0;

  // gradcheck
  std::string dtype = "f64";
  std::string inject_fault;

  bool deterministic = true;
};

const std::vector<std::string>& commands();
RunConfig defaults_for(const std::string& command);

/// Registered keys in dump order.
const std::vector<std::string>& config_keys();
bool is_bool_key(const std::string& key);
std::string key_help(const std::string& key);

/// Throws ConfigError(key) on unknown keys or unparsable values.
void set_key(RunConfig& cfg, const std::string& key, const std::string& value);
std::string get_key(const RunConfig& cfg, const std::string& key);

/// key=value lines; '#' starts a comment; blank lines ignored.
std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text);
std::vector<std::pair<std::string, std::string>> read_config_file(const std::string& path);

/// Applies `preset` (if present) first, then every other entry in order.
RunConfig resolve(const std::string& command, const std::vector<std::pair<std::string, std::string>>& entries);

std::string dump_config(const RunConfig& cfg);

/// Fills zero clip dimensions from the dataset and returns the model config.
ModelConfig model_for(const RunConfig& cfg, const synth::DatasetHeader& header);

/// Parses MV2MAE_THREADS; unset means 1.
std::size_t thread_count_from_env();

// Commands. Each throws ConfigError for bad settings and other exceptions for
// runtime failures; human-readable progress goes to `out`.
int cmd_gen_data(const RunConfig& cfg, std::ostream& out);
int cmd_pretrain(const RunConfig& cfg, std::ostream& out);
int cmd_finetune(const RunConfig& cfg, std::ostream& out);
int cmd_eval(const RunConfig& cfg, std::ostream& out);
int cmd_viz(const RunConfig& cfg, std::ostream& out);
int cmd_gradcheck(const RunConfig& cfg, std::ostream& out);
int run_command(const RunConfig& cfg, std::ostream& out);

}  // namespace mv2mae::cli
