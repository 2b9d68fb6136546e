#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

#include "mv2mae/cli.hpp"
#include "mv2mae/errors.hpp"

namespace mv2mae::cli {

namespace {

struct Entry {
  std::string key;
  std::string help;
  bool is_bool = false;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class N>
N parse_number(const std::string& key, const std::string& value) {
  N out{};
  const auto v = trim(value);
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || r.ec != std::errc() || r.ptr != v.data() + v.size()) {
    throw ConfigError(key, "cannot parse '" + value + "' as a number");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  std::string v = trim(value);
  std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(key, "expected true or false, got '" + value + "'");
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <class N>
std::string join(const std::vector<N>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ',';
    if constexpr (std::is_floating_point_v<N>) {
      out += format_number(xs[i]);
    } else {
      out += std::to_string(xs[i]);
    }
  }
  return out;
}

std::string bool_str(bool b) { return b ? "true" : "false"; }

#define MV2MAE_SIZE(name, field, help)                                                                 \
  Entry{name, help, false, [](RunConfig& c, const std::string& v) { c.field = parse_number<std::size_t>(name, v); }, \
        [](const RunConfig& c) { return std::to_string(c.field); }}
#define MV2MAE_U64(name, field, help)                                                                    \
  Entry{name, help, false, [](RunConfig& c, const std::string& v) { c.field = parse_number<std::uint64_t>(name, v); }, \
        [](const RunConfig& c) { return std::to_string(c.field); }}
#define MV2MAE_REAL(name, field, help)                                                            \
  Entry{name, help, false, [](RunConfig& c, const std::string& v) { c.field = parse_number<double>(name, v); }, \
        [](const RunConfig& c) { return format_number(c.field); }}
#define MV2MAE_BOOL(name, field, help)                                                       \
  Entry{name, help, true, [](RunConfig& c, const std::string& v) { c.field = parse_bool(name, v); }, \
        [](const RunConfig& c) { return bool_str(c.field); }}
#define MV2MAE_STR(name, field, help)                                                 \
  Entry{name, help, false, [](RunConfig& c, const std::string& v) { c.field = trim(v); }, \
        [](const RunConfig& c) { return c.field; }}

void apply_preset(RunConfig& c, const std::string& name) {
  auto& m = c.train.model;
  if (name == "small") {
    const auto s = ModelConfig::vit_small();
    m.d_enc = s.d_enc, m.enc_depth = s.enc_depth, m.enc_heads = s.enc_heads, m.enc_mlp = s.enc_mlp;
    m.d_dec = s.d_dec, m.dec_depth = s.dec_depth, m.dec_heads = s.dec_heads, m.dec_mlp = s.dec_mlp;
    m.patch.t_patch = 2, m.patch.h_patch = m.patch.w_patch = 16;
  } else if (name == "tiny") {
    m.d_enc = 64, m.enc_depth = 4, m.enc_heads = 4, m.enc_mlp = 256;
    m.d_dec = 32, m.dec_depth = 2, m.dec_heads = 2, m.dec_mlp = 128;
    m.patch.t_patch = 2, m.patch.h_patch = m.patch.w_patch = 8;
  } else {
    throw ConfigError("preset", "unknown preset '" + name + "' (expected small or tiny)");
  }
  c.preset = name;
}

const std::vector<Entry>& registry() {
  static const std::vector<Entry> entries = {
      Entry{"preset", "model size: small (ViT-S encoder) or tiny", false,
            [](RunConfig& c, const std::string& v) { apply_preset(c, trim(v)); },
            [](const RunConfig& c) { return c.preset; }},
      MV2MAE_U64("seed", train.seed, "random seed"),
      MV2MAE_STR("data", data, "dataset file"),
      MV2MAE_STR("checkpoint", checkpoint, "input checkpoint"),
      MV2MAE_STR("out_dir", out_dir, "output directory"),
      MV2MAE_STR("resume", resume, "checkpoint to resume pre-training from"),
      MV2MAE_STR("out", out, "gen-data output file"),
      MV2MAE_SIZE("samples", samples, "gen-data: number of samples"),
      MV2MAE_SIZE("views", views, "gen-data: cameras per sample"),
      MV2MAE_SIZE("classes", classes, "gen-data: number of motion classes used"),
      MV2MAE_SIZE("size", size, "gen-data: frame height and width"),
      MV2MAE_SIZE("frames", frames, "gen-data: frames per clip"),
      MV2MAE_SIZE("clip_frames", clip_frames, "model clip length (0 = dataset)"),
      MV2MAE_SIZE("clip_size", clip_size, "model frame size (0 = dataset)"),
      MV2MAE_SIZE("t_patch", train.model.patch.t_patch, "temporal patch size"),
      Entry{"patch_size", "spatial patch size", false,
            [](RunConfig& c, const std::string& v) {
              c.train.model.patch.h_patch = c.train.model.patch.w_patch = parse_number<std::size_t>("patch_size", v);
            },
            [](const RunConfig& c) { return std::to_string(c.train.model.patch.h_patch); }},
      MV2MAE_SIZE("d_enc", train.model.d_enc, "encoder width"),
      MV2MAE_SIZE("enc_depth", train.model.enc_depth, "encoder blocks"),
      MV2MAE_SIZE("enc_heads", train.model.enc_heads, "encoder attention heads"),
      MV2MAE_SIZE("enc_mlp", train.model.enc_mlp, "encoder MLP width"),
      MV2MAE_SIZE("d_dec", train.model.d_dec, "decoder width"),
      MV2MAE_SIZE("dec_depth", train.model.dec_depth, "decoder blocks"),
      MV2MAE_SIZE("dec_heads", train.model.dec_heads, "decoder attention heads"),
      MV2MAE_SIZE("dec_mlp", train.model.dec_mlp, "decoder MLP width"),
      MV2MAE_SIZE("n_classes", train.model.n_classes, "classifier outputs"),
      MV2MAE_REAL("drop_path", train.model.drop_path_rate, "stochastic depth rate of the last block"),
      MV2MAE_SIZE("epochs", train.epochs, "training epochs"),
      MV2MAE_SIZE("batch_size", train.batch_size, "samples per step"),
      MV2MAE_REAL("lr", train.base_lr, "base learning rate"),
      MV2MAE_REAL("min_lr", train.min_lr, "final learning rate"),
      MV2MAE_REAL("warmup_epochs", train.warmup_epochs, "linear warmup length"),
      MV2MAE_REAL("beta1", train.adamw.beta1, "AdamW beta1"),
      MV2MAE_REAL("beta2", train.adamw.beta2, "AdamW beta2"),
      MV2MAE_REAL("adam_eps", train.adamw.eps, "AdamW epsilon"),
      MV2MAE_REAL("weight_decay", train.adamw.weight_decay, "decoupled weight decay"),
      MV2MAE_REAL("rho", train.rho, "masking ratio"),
      Entry{"mask", "masking strategy: random or tube", false,
            [](RunConfig& c, const std::string& v) {
              const auto s = trim(v);
              if (s == "random") c.train.mask = MaskStrategy::random;
              else if (s == "tube") c.train.mask = MaskStrategy::tube;
              else throw ConfigError("mask", "expected random or tube, got '" + v + "'");
            },
            [](const RunConfig& c) { return std::string(c.train.mask == MaskStrategy::tube ? "tube" : "random"); }},
      MV2MAE_REAL("temperature", train.temperature, "motion weight temperature"),
      MV2MAE_BOOL("motion_weighting", train.motion_weighting, "false = uniform token weights"),
      MV2MAE_REAL("lambda_cross", train.objective.lambda_cross, "cross-view loss weight"),
      MV2MAE_BOOL("rescale_weights", train.objective.rescale_weights, "multiply motion weights by N"),
      MV2MAE_BOOL("symmetric", train.objective.symmetric, "reconstruct both directions per pair"),
      MV2MAE_SIZE("n_source_views", train.n_source_views, "views feeding the cross-view decoder"),
      MV2MAE_BOOL("crop", train.crop, "random-resized-crop augmentation"),
      MV2MAE_REAL("crop_scale_min", train.crop_scale_min, "smallest crop area fraction"),
      MV2MAE_BOOL("flip", train.flip, "horizontal flips when fine-tuning"),
      MV2MAE_REAL("layer_decay", train.layer_decay, "layer-wise learning rate decay"),
      MV2MAE_REAL("label_smoothing", train.label_smoothing, "label smoothing"),
      MV2MAE_BOOL("linear_probe", train.linear_probe, "freeze the encoder when fine-tuning"),
      MV2MAE_SIZE("checkpoint_every", train.checkpoint_every, "extra checkpoint interval in epochs (0 = off)"),
      MV2MAE_SIZE("n_clips", eval.n_clips, "temporal clips per view at evaluation"),
      MV2MAE_SIZE("n_crops", eval.n_crops, "spatial crops per clip: 1, 2 or 10"),
      Entry{"eval_views", "comma-separated views to fuse (empty = all)", false,
            [](RunConfig& c, const std::string& v) {
              c.eval.views.clear();
              for (const auto& s : split_list(v)) c.eval.views.push_back(parse_number<std::uint32_t>("eval_views", s));
            },
            [](const RunConfig& c) { return join(c.eval.views); }},
      MV2MAE_STR("kind", kind, "viz: motion-weights, recon or xattn"),
      MV2MAE_SIZE("sample", sample, "viz: sample index"),
      MV2MAE_SIZE("view", view, "viz: target view"),
      MV2MAE_SIZE("layer", layer, "viz: cross-attention layer"),
      MV2MAE_SIZE("head", head, "viz: attention head"),
      MV2MAE_SIZE("query", query, "viz: query token"),
      Entry{"temperatures", "viz: comma-separated motion weight temperatures", false,
            [](RunConfig& c, const std::string& v) {
              c.temperatures.clear();
              for (const auto& s : split_list(v)) c.temperatures.push_back(parse_number<double>("temperatures", s));
              if (c.temperatures.empty()) throw ConfigError("temperatures", "empty list");
            },
            [](const RunConfig& c) { return join(c.temperatures); }},
      MV2MAE_U64("mask_epoch", mask_epoch, "viz: epoch used to key the masks"),
      MV2MAE_STR("dtype", dtype, "gradcheck precision: f64 or f32"),
      MV2MAE_STR("inject_fault", inject_fault, "gradcheck: negate this primitive's backward"),
      MV2MAE_BOOL("deterministic", deterministic, "fixed-order single-threaded execution"),
  };
  return entries;
}

const Entry& entry(const std::string& key) {
  for (const auto& e : registry())
    if (e.key == key) return e;
  throw ConfigError(key, "unknown configuration key");
}

}  // namespace

const std::vector<std::string>& commands() {
  static const std::vector<std::string> c = {"gen-data", "pretrain", "finetune", "eval", "viz", "gradcheck"};
  return c;
}

RunConfig defaults_for(const std::string& command) {
  if (std::find(commands().begin(), commands().end(), command) == commands().end()) {
    throw ConfigError("command", "unknown command '" + command + "'");
  }
  RunConfig c;
  c.command = command;
  c.train = command == "finetune" || command == "eval" ? TrainConfig::finetune_defaults() : TrainConfig::pretrain_defaults();
  apply_preset(c, "small");
  c.out_dir = command == "finetune" ? "run_finetune" : command == "pretrain" ? "run_pretrain" : "run";
  return c;
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& e : registry()) k.push_back(e.key);
    return k;
  }();
  return keys;
}

bool is_bool_key(const std::string& key) { return entry(key).is_bool; }
std::string key_help(const std::string& key) { return entry(key).help; }

void set_key(RunConfig& cfg, const std::string& key, const std::string& value) { entry(key).set(cfg, value); }
std::string get_key(const RunConfig& cfg, const std::string& key) { return entry(key).get(cfg); }

std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::stringstream ss(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("", "config line " + std::to_string(lineno) + " is not key=value: '" + line + "'");
    }
    auto key = trim(line.substr(0, eq));
    entry(key);
    out.emplace_back(std::move(key), trim(line.substr(eq + 1)));
  }
  return out;
}

std::vector<std::pair<std::string, std::string>> read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

RunConfig resolve(const std::string& command, const std::vector<std::pair<std::string, std::string>>& entries) {
  RunConfig cfg = defaults_for(command);
  // The preset rewrites model fields, so it goes first and explicit keys win.
  for (const auto& [k, v] : entries)
    if (k == "preset") set_key(cfg, k, v);
  for (const auto& [k, v] : entries)
    if (k != "preset") set_key(cfg, k, v);
  return cfg;
}

std::string dump_config(const RunConfig& cfg) {
  std::string out = "# mv2mae " + cfg.command + "\n";
  for (const auto& e : registry()) out += e.key + " = " + e.get(cfg) + "\n";
  return out;
}

ModelConfig model_for(const RunConfig& cfg, const synth::DatasetHeader& header) {
  ModelConfig m = cfg.train.model;
  m.patch.frames = cfg.clip_frames ? cfg.clip_frames : header.frames;
  m.patch.height = m.patch.width = cfg.clip_size ? cfg.clip_size : header.height;
  if (!cfg.clip_size && header.height != header.width) m.patch.width = header.width;
  m.patch.channels = header.channels;
  m.validate();
  return m;
}

std::size_t thread_count_from_env() {
  const char* v = std::getenv("MV2MAE_THREADS");
  if (v == nullptr || *v == '\0') return 1;
  const auto n = parse_number<std::size_t>("MV2MAE_THREADS", v);
  if (n == 0) throw ConfigError("MV2MAE_THREADS", "must be a positive integer");
  return n;
}

}  // namespace mv2mae::cli
