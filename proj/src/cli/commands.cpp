#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <ostream>

#include "mv2mae/augment.hpp"
#include "mv2mae/cli.hpp"
#include "mv2mae/errors.hpp"
#include "mv2mae/gradcheck.hpp"
#include "mv2mae/viz.hpp"

namespace mv2mae::cli {

namespace fs = std::filesystem;

namespace {

const std::vector<std::string>& fault_targets() {
  static const std::vector<std::string> ops = {"add",    "sub",         "mul",         "scale",   "square",
                                               "sum",    "sum_dim",     "matmul",      "reshape", "permute",
                                               "concat", "gather_rows", "scatter_rows", "softmax", "log_softmax",
                                               "layer_norm", "gelu"};
  return ops;
}

void require_file(const std::string& key, const std::string& path) {
  if (path.empty()) throw ConfigError(key, "a path is required");
  if (!fs::is_regular_file(path)) throw ConfigError(key, "no such file '" + path + "'");
}

synth::Dataset load_data(const RunConfig& cfg) {
  require_file("data", cfg.data);
  return synth::read_dataset(cfg.data);
}

fs::path prepare_out_dir(const RunConfig& cfg) {
  if (cfg.out_dir.empty()) throw ConfigError("out_dir", "a directory is required");
  fs::create_directories(cfg.out_dir);
  return cfg.out_dir;
}

/// Picks the tensors of `set` out of a checkpoint, checking names and shapes.
ModelParams<float> load_params(const std::string& path, const ModelConfig& model, ParamSet set) {
  require_file("checkpoint", path);
  auto stored = load_checkpoint<float>(path);
  auto params = init_params<float>(model, 0, set);
  for (auto& [name, t] : params.tensors()) {
    const auto it = stored.find(name);
    if (it == stored.end()) throw ConfigError("checkpoint", "missing tensor '" + name + "' in " + path);
    if (it->second.shape() != t.shape()) {
      throw ConfigError("checkpoint", "tensor '" + name + "' has shape " + shape_str(it->second.shape()) +
                                          ", the model expects " + shape_str(t.shape()));
    }
    t = Tensor<float>(t.shape(), std::vector<float>(it->second.data().begin(), it->second.data().end()), true);
  }
  return params;
}

TrainConfig train_config(const RunConfig& cfg, const synth::Dataset& data) {
  TrainConfig t = cfg.train;
  t.model = model_for(cfg, data.header);
  t.validate();
  return t;
}

const synth::MultiViewSample& pick_sample(const RunConfig& cfg, const synth::Dataset& data) {
  if (cfg.sample >= data.samples.size()) {
    throw ConfigError("sample", "index " + std::to_string(cfg.sample) + " out of range (dataset has " +
                                    std::to_string(data.samples.size()) + ")");
  }
  if (cfg.view >= data.header.n_views) {
    throw ConfigError("view", "index " + std::to_string(cfg.view) + " out of range (dataset has " +
                                  std::to_string(data.header.n_views) + " views)");
  }
  return data.samples[cfg.sample];
}

ClipTensor centered_clip(const ClipTensor& clip, const PatchConfig& pc) {
  const auto start = temporal_starts(clip.frames, pc.frames, 1).front();
  return crop_clip(clip, full_crop(clip.height, clip.width), start, pc.frames, pc.height, pc.width);
}

std::string tsv_path_of(const fs::path& ppm) {
  auto p = ppm;
  return p.replace_extension(".tsv").string();
}

int viz_motion_weights(const RunConfig& cfg, const synth::Dataset& data, const fs::path& dir, std::ostream& out) {
  const auto pc = model_for(cfg, data.header).patch;
  const auto& sample = pick_sample(cfg, data);
  const auto clip = centered_clip(sample.clips[cfg.view], pc);
  for (const double temp : cfg.temperatures) {
    const auto w = motion_weights<double>({&clip}, pc, temp).weights;
    const std::vector<double> values(w.data().begin(), w.data().end());
    const double peak = *std::max_element(values.begin(), values.end());
    std::vector<double> rel(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) rel[i] = values[i] / peak;
    std::vector<viz::Image> row;
    for (std::size_t t = 0; t < pc.frames; ++t) row.push_back(viz::overlay(viz::frame_image(clip, t), viz::token_heat(pc, rel, t)));
    const fs::path ppm = dir / ("motion_weights_s" + std::to_string(cfg.sample) + "_v" + std::to_string(cfg.view) +
                                "_t" + format_number(temp) + ".ppm");
    viz::write_ppm(ppm, viz::tile({row}));
    std::ofstream tsv(tsv_path_of(ppm));
    tsv << "token\tweight\n";
    for (std::size_t i = 0; i < values.size(); ++i) tsv << i << '\t' << format_number(values[i]) << '\n';
    if (!tsv) throw std::runtime_error("failed writing " + tsv_path_of(ppm));
    out << "wrote " << ppm.string() << '\n';
  }
  return 0;
}

struct PairForward {
  ClipTensor source, target;
  ViewBatch<float> sv, tv;
  TokenBatch<float> enc_sv, enc_tv;
};

PairForward pair_forward(const RunConfig& cfg, const synth::MultiViewSample& sample, const Model<float>& model) {
  const auto& pc = model.config().patch;
  const std::size_t src_view = cfg.view == 0 ? 1 : 0;
  PairForward f;
  f.source = centered_clip(sample.clips[src_view], pc);
  f.target = centered_clip(sample.clips[cfg.view], pc);
  const auto& t = cfg.train;
  f.sv = make_view_batch<float>({&f.source}, pc, {make_mask(t.mask, pc, t.rho, {t.seed, sample.sample_id, cfg.mask_epoch, 0})},
                                false, t.temperature);
  f.tv = make_view_batch<float>({&f.target}, pc, {make_mask(t.mask, pc, t.rho, {t.seed, sample.sample_id, cfg.mask_epoch, 1})},
                                false, t.temperature);
  f.enc_sv = model.encoder_forward(split_tokens(model.tokenize(f.sv.inputs), f.sv.plans).visible);
  f.enc_tv = model.encoder_forward(split_tokens(model.tokenize(f.tv.inputs), f.tv.plans).visible);
  return f;
}

/// Undoes per-patch target normalization with the statistics of `raw`; visible
/// patches keep their original pixels.
ClipTensor denormalized(const Tensor<float>& pred, const Tensor<float>& raw, const MaskPlan& plan, const PatchConfig& pc) {
  const std::size_t N = raw.dim(0), P = raw.dim(1);
  std::vector<float> out(raw.data().begin(), raw.data().end());
  const auto p = pred.data();
  for (const auto i : plan.masked) {
    double mean = 0, var = 0;
    for (std::size_t j = 0; j < P; ++j) mean += out[i * P + j];
    mean /= static_cast<double>(P);
    for (std::size_t j = 0; j < P; ++j) var += (out[i * P + j] - mean) * (out[i * P + j] - mean);
    const double sd = std::sqrt(var / static_cast<double>(P)) + 1e-6;
    for (std::size_t j = 0; j < P; ++j) out[i * P + j] = static_cast<float>(p[i * P + j] * sd + mean);
  }
  return unpatchify<float>(Tensor<float>({N, P}, std::move(out)), pc);
}

int viz_recon(const RunConfig& cfg, const synth::Dataset& data, const fs::path& dir, std::ostream& out) {
  auto mc = model_for(cfg, data.header);
  mc.n_classes = 0;
  auto params = load_params(cfg.checkpoint, mc, ParamSet::pretrain);
  const auto& sample = pick_sample(cfg, data);
  NoGradGuard no_grad;
  Model<float> model(mc, &params);
  const auto f = pair_forward(cfg, sample, model);
  const auto full_tv = model.assemble_decoder_input(f.enc_tv, f.tv.plans);
  const auto& pc = mc.patch;
  const auto raw = patchify<float>(f.target, pc);
  const auto& plan = f.tv.plans.front();
  auto squeeze = [&](const Tensor<float>& x) { return reshape(x, {pc.num_tokens(), pc.patch_dim()}); };
  const auto self_clip = denormalized(squeeze(model.self_view_decoder(full_tv)), raw, plan, pc);
  const auto cross_clip = denormalized(squeeze(model.cross_view_decoder(full_tv, {f.enc_sv})), raw, plan, pc);
  std::vector<float> masked_px(raw.data().begin(), raw.data().end());
  for (const auto i : plan.masked) std::fill_n(masked_px.begin() + static_cast<std::ptrdiff_t>(i * pc.patch_dim()), pc.patch_dim(), 0.5f);
  const auto masked_clip = unpatchify<float>(Tensor<float>(raw.shape(), std::move(masked_px)), pc);

  std::vector<std::vector<viz::Image>> rows(4);
  for (std::size_t t = 0; t < pc.frames; ++t) {
    rows[0].push_back(viz::frame_image(f.target, t));
    rows[1].push_back(viz::frame_image(masked_clip, t));
    rows[2].push_back(viz::frame_image(self_clip, t));
    rows[3].push_back(viz::frame_image(cross_clip, t));
  }
  const fs::path ppm = dir / ("recon_s" + std::to_string(cfg.sample) + "_v" + std::to_string(cfg.view) + ".ppm");
  viz::write_ppm(ppm, viz::tile(rows));
  out << "wrote " << ppm.string() << '\n';
  return 0;
}

int viz_xattn(const RunConfig& cfg, const synth::Dataset& data, const fs::path& dir, std::ostream& out) {
  auto mc = model_for(cfg, data.header);
  mc.n_classes = 0;
  if (cfg.layer >= mc.dec_depth) throw ConfigError("layer", "decoder has " + std::to_string(mc.dec_depth) + " blocks");
  if (cfg.head >= mc.dec_heads) throw ConfigError("head", "decoder has " + std::to_string(mc.dec_heads) + " heads");
  if (cfg.query >= mc.patch.num_tokens()) {
    throw ConfigError("query", "model has " + std::to_string(mc.patch.num_tokens()) + " tokens");
  }
  auto params = load_params(cfg.checkpoint, mc, ParamSet::pretrain);
  const auto& sample = pick_sample(cfg, data);
  NoGradGuard no_grad;
  Model<float> model(mc, &params);
  const auto f = pair_forward(cfg, sample, model);
  AttentionRecorder<float> recorder;
  model.cross_view_decoder(model.assemble_decoder_input(f.enc_tv, f.tv.plans), {f.enc_sv}, &recorder);
  const auto row = attention_map_extract(&recorder, cfg.layer, cfg.head, cfg.query);
  const auto& keys = f.enc_sv.token_index.front();

  const auto& pc = mc.patch;
  std::vector<double> per_token(pc.num_tokens(), 0.0);
  for (std::size_t k = 0; k < row.size(); ++k) per_token[keys[k]] = row[k];
  const double peak = *std::max_element(per_token.begin(), per_token.end());
  for (auto& v : per_token) v = peak > 0 ? v / peak : 0.0;
  std::vector<viz::Image> images;
  for (std::size_t t = 0; t < pc.frames; ++t) {
    images.push_back(viz::overlay(viz::frame_image(f.source, t), viz::token_heat(pc, per_token, t)));
  }
  const fs::path ppm = dir / ("xattn_s" + std::to_string(cfg.sample) + "_v" + std::to_string(cfg.view) + "_l" +
                              std::to_string(cfg.layer) + "_h" + std::to_string(cfg.head) + "_q" +
                              std::to_string(cfg.query) + ".ppm");
  viz::write_ppm(ppm, viz::tile({images}));
  std::ofstream tsv(tsv_path_of(ppm));
  tsv << "key\tsource_token\tweight\n";
  for (std::size_t k = 0; k < row.size(); ++k) tsv << k << '\t' << keys[k] << '\t' << format_number(row[k]) << '\n';
  if (!tsv) throw std::runtime_error("failed writing " + tsv_path_of(ppm));
  out << "wrote " << ppm.string() << '\n';
  return 0;
}

}  // namespace

int cmd_gen_data(const RunConfig& cfg, std::ostream& out) {
  if (cfg.views < 2) throw ConfigError("views", "cross-view training needs at least 2 views");
  if (cfg.samples == 0) throw ConfigError("samples", "must be positive");
  if (cfg.classes == 0 || cfg.classes > synth::kNumMotionClasses) {
    throw ConfigError("classes", "must lie in 1.." + std::to_string(synth::kNumMotionClasses));
  }
  if (cfg.frames == 0 || cfg.size == 0) throw ConfigError(cfg.frames == 0 ? "frames" : "size", "must be positive");
  if (cfg.out.empty()) throw ConfigError("out", "an output path is required");
  synth::GenerateOptions g;
  g.seed = cfg.train.seed;
  g.n_samples = cfg.samples;
  g.n_views = cfg.views;
  g.frames = cfg.frames;
  g.height = g.width = cfg.size;
  g.class_mix.assign(synth::kNumMotionClasses, 0.0);
  std::fill_n(g.class_mix.begin(), cfg.classes, 1.0);
  const auto ds = synth::generate_dataset(g);
  if (const auto parent = fs::path(cfg.out).parent_path(); !parent.empty()) fs::create_directories(parent);
  synth::write_dataset(ds, cfg.out);
  out << "samples=" << cfg.samples << " views=" << cfg.views << " frames=" << cfg.frames << " size=" << cfg.size << 'x'
      << cfg.size << " classes=" << cfg.classes << " bytes=" << fs::file_size(cfg.out) << " path=" << cfg.out << '\n';
  return 0;
}

int cmd_pretrain(const RunConfig& cfg, std::ostream& out) {
  const auto data = load_data(cfg);
  auto train = train_config(cfg, data);
  train.model.n_classes = 0;
  if (!cfg.resume.empty()) require_file("resume", cfg.resume);
  const auto dir = prepare_out_dir(cfg);
  const auto result = pretrain(data, train, {dir, cfg.resume});
  for (std::size_t e = 0; e < result.epoch_mean_total.size(); ++e) {
    out << "epoch " << e + 1 << " loss=" << format_number(result.epoch_mean_total[e]) << '\n';
  }
  out << "checkpoint=" << (dir / "checkpoint.mv2c").string() << '\n';
  return 0;
}

int cmd_finetune(const RunConfig& cfg, std::ostream& out) {
  const auto data = load_data(cfg);
  const auto train = train_config(cfg, data);
  TensorMap<float> stored;
  if (!cfg.checkpoint.empty()) {
    require_file("checkpoint", cfg.checkpoint);
    stored = load_checkpoint<float>(cfg.checkpoint);
  }
  const auto dir = prepare_out_dir(cfg);
  const auto result = finetune(data, cfg.checkpoint.empty() ? nullptr : &stored, train, {dir, {}});
  out << "encoder=" << (cfg.checkpoint.empty() ? std::string("random") : cfg.checkpoint) << '\n';
  if (!result.rows.empty()) {
    out << "final_ce=" << format_number(result.rows.back().loss) << " final_acc=" << format_number(result.rows.back().acc)
        << '\n';
  }
  out << "checkpoint=" << (dir / "checkpoint.mv2c").string() << '\n';
  return 0;
}

int cmd_eval(const RunConfig& cfg, std::ostream& out) {
  const auto data = load_data(cfg);
  const auto model = model_for(cfg, data.header);
  if (model.n_classes == 0) throw ConfigError("n_classes", "evaluation needs a classifier");
  auto params = load_params(cfg.checkpoint, model, ParamSet::finetune);
  const auto dir = prepare_out_dir(cfg);
  const auto result = evaluate(data, params, model, cfg.eval);
  write_logits_tsv(dir / "logits.tsv", result);
  out << "samples=" << result.labels.size() << " clips=" << cfg.eval.n_clips << " crops=" << cfg.eval.n_crops
      << " logits=" << (dir / "logits.tsv").string() << '\n';
  out << "accuracy=" << format_number(result.accuracy) << '\n';
  return 0;
}

int cmd_viz(const RunConfig& cfg, std::ostream& out) {
  if (cfg.kind != "motion-weights" && cfg.kind != "recon" && cfg.kind != "xattn") {
    throw ConfigError("kind", "expected motion-weights, recon or xattn, got '" + cfg.kind + "'");
  }
  if (cfg.kind != "motion-weights") require_file("checkpoint", cfg.checkpoint);
  const auto data = load_data(cfg);
  const auto dir = prepare_out_dir(cfg);
  if (cfg.kind == "motion-weights") return viz_motion_weights(cfg, data, dir, out);
  if (cfg.kind == "recon") return viz_recon(cfg, data, dir, out);
  return viz_xattn(cfg, data, dir, out);
}

int cmd_gradcheck(const RunConfig& cfg, std::ostream& out) {
  if (cfg.dtype != "f64" && cfg.dtype != "f32") throw ConfigError("dtype", "expected f64 or f32, got '" + cfg.dtype + "'");
  if (!cfg.inject_fault.empty() &&
      std::find(fault_targets().begin(), fault_targets().end(), cfg.inject_fault) == fault_targets().end()) {
    throw ConfigError("inject_fault", "unknown primitive '" + cfg.inject_fault + "'");
  }
  GradcheckOptions opts;
  opts.seed = cfg.train.seed;
  set_backward_fault(cfg.inject_fault);
  GradcheckReport report;
  try {
    report = cfg.dtype == "f64" ? run_gradcheck<double>(opts) : run_gradcheck<float>(opts);
  } catch (...) {
    set_backward_fault("");
    throw;
  }
  set_backward_fault("");
  auto line = [&](const char* kind, const GradcheckEntry& e) {
    out << kind << '\t' << e.name << "\trel_error=" << format_number(e.rel_error) << "\ttol=" << format_number(e.tolerance)
        << '\t' << (e.pass ? "ok" : "FAIL") << '\n';
  };
  for (const auto& e : report.primitives) line("primitive", e);
  for (const auto& e : report.model_groups) line("group", e);
  out << "gradcheck " << cfg.dtype << ": " << (report.pass ? "PASS" : "FAIL") << '\n';
  return report.pass ? 0 : 1;
}

int run_command(const RunConfig& cfg, std::ostream& out) {
  thread_count_from_env();
  if (cfg.command == "gen-data") return cmd_gen_data(cfg, out);
  if (cfg.command == "pretrain") return cmd_pretrain(cfg, out);
  if (cfg.command == "finetune") return cmd_finetune(cfg, out);
  if (cfg.command == "eval") return cmd_eval(cfg, out);
  if (cfg.command == "viz") return cmd_viz(cfg, out);
  if (cfg.command == "gradcheck") return cmd_gradcheck(cfg, out);
  throw ConfigError("command", "unknown command '" + cfg.command + "'");
}

}  // namespace mv2mae::cli
