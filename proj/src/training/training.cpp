#include "mv2mae/training.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "mv2mae/augment.hpp"
#include "mv2mae/errors.hpp"
#include "mv2mae/rng.hpp"

namespace mv2mae {

namespace {

constexpr std::uint64_t kShuffleStream = 0x5f1e;
constexpr std::uint64_t kPretrainAug = 0xa11a;
constexpr std::uint64_t kFinetuneAug = 0xf17e;
constexpr std::uint64_t kDropPath = 0xd509;

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

bool starts_with(const std::string& s, std::string_view prefix) { return s.rfind(prefix, 0) == 0; }

bool is_encoder_tensor(const std::string& name) { return starts_with(name, "embed.") || starts_with(name, "enc."); }

void check_geometry(const synth::DatasetHeader& hdr, const PatchConfig& pc) {
  if (hdr.channels != pc.channels) {
    throw ConfigError("channels", "dataset has " + std::to_string(hdr.channels) + " channels, model expects " +
                                      std::to_string(pc.channels));
  }
  if (hdr.frames < pc.frames) {
    throw ConfigError("frames", "dataset clips have " + std::to_string(hdr.frames) + " frames, model needs " +
                                    std::to_string(pc.frames));
  }
}

template <class F>
void for_each_batch(std::size_t n, std::size_t batch, F&& f) {
  for (std::size_t b0 = 0; b0 < n; b0 += batch) f(b0, std::min(n, b0 + batch));
}

std::vector<const ClipTensor*> pointers(const std::vector<ClipTensor>& clips) {
  std::vector<const ClipTensor*> out;
  out.reserve(clips.size());
  for (const auto& c : clips) out.push_back(&c);
  return out;
}

TensorMap<float> training_state(const ModelParams<float>& params, const OptimState<float>* opt, std::size_t epoch) {
  TensorMap<float> out(params.tensors().begin(), params.tensors().end());
  if (opt == nullptr) return out;
  for (const auto& [name, t] : params.tensors()) {
    if (auto it = opt->m.find(name); it != opt->m.end()) out.emplace("opt.m." + name, Tensor<float>(t.shape(), it->second));
    if (auto it = opt->v.find(name); it != opt->v.end()) out.emplace("opt.v." + name, Tensor<float>(t.shape(), it->second));
  }
  out.emplace("opt.step", Tensor<float>::scalar(static_cast<float>(opt->step)));
  out.emplace("train.epoch", Tensor<float>::scalar(static_cast<float>(epoch)));
  return out;
}

void copy_tensor(const std::string& name, const TensorMap<float>& src, Tensor<float>& dst, const std::string& key) {
  const auto it = src.find(name);
  if (it == src.end()) throw ConfigError(key, "checkpoint has no tensor '" + name + "'");
  if (it->second.shape() != dst.shape()) {
    throw ConfigError(key, "tensor '" + name + "' has shape " + shape_str(it->second.shape()) + " in the checkpoint, model expects " +
                               shape_str(dst.shape()));
  }
  std::copy(it->second.data().begin(), it->second.data().end(), dst.mutable_data().begin());
}

std::size_t restore_training_state(const TensorMap<float>& ck, ModelParams<float>& params, OptimState<float>& opt) {
  for (auto& [name, t] : params.tensors()) copy_tensor(name, ck, t, "resume");
  for (const auto& [name, t] : params.tensors()) {
    if (auto it = ck.find("opt.m." + name); it != ck.end()) opt.m[name].assign(it->second.data().begin(), it->second.data().end());
    if (auto it = ck.find("opt.v." + name); it != ck.end()) opt.v[name].assign(it->second.data().begin(), it->second.data().end());
  }
  const auto step = ck.find("opt.step");
  const auto epoch = ck.find("train.epoch");
  if (step == ck.end() || epoch == ck.end()) throw ConfigError("resume", "checkpoint carries no optimizer state");
  opt.step = static_cast<std::uint64_t>(step->second.item());
  return static_cast<std::size_t>(epoch->second.item());
}

// Opens metrics.tsv, keeping rows before `first_step` when resuming.
std::ofstream open_metrics(const std::filesystem::path& path, const std::string& header, std::size_t first_step,
                           bool resuming) {
  std::vector<std::string> kept;
  if (resuming) {
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      std::size_t step = 0;
      std::from_chars(line.data(), line.data() + line.size(), step);
      if (step < first_step) kept.push_back(line);
    }
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << header << '\n';
  for (const auto& l : kept) out << l << '\n';
  return out;
}

void write_row(std::ofstream& out, std::size_t step, std::initializer_list<double> values) {
  out << step;
  for (double v : values) out << '\t' << format_number(v);
  out << '\n';
  out.flush();
}

}  // namespace

std::string format_number(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

bool applies_weight_decay(const std::string& name) {
  return !(ends_with(name, ".bias") || ends_with(name, ".gain") || name == "mask_token");
}

template <class T>
void adamw_step(ModelParams<T>& params, OptimState<T>& state, const AdamWConfig& cfg, double lr,
                const std::function<double(const std::string&)>& lr_scale) {
  // Validate every gradient before touching any parameter.
  for (const auto& [name, p] : params.tensors()) {
    if (!p.requires_grad() || !p.has_grad()) continue;
    for (T g : p.impl()->grad)
      if (!std::isfinite(g)) throw std::runtime_error("adamw_step: non-finite gradient in parameter '" + name + "'");
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1 - std::pow(cfg.beta1, t);
  const double bc2 = 1 - std::pow(cfg.beta2, t);
  for (auto& [name, p] : params.tensors()) {
    if (!p.requires_grad() || !p.has_grad()) continue;
    const auto& g = p.impl()->grad;
    auto theta = p.mutable_data();
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.empty()) m.assign(theta.size(), T(0));
    if (v.empty()) v.assign(theta.size(), T(0));
    const double step_lr = lr * (lr_scale ? lr_scale(name) : 1.0);
    const double decay = applies_weight_decay(name) ? step_lr * cfg.weight_decay : 0.0;
    const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = b1 * m[i] + (1 - b1) * g[i];
      v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      const double upd = step_lr * mhat / (std::sqrt(vhat) + cfg.eps);
      theta[i] = static_cast<T>(theta[i] - decay * theta[i] - upd);
    }
  }
}

void Schedule::validate() const {
  if (!(base_lr >= 0)) throw ConfigError("base_lr", "must be nonnegative");
  if (!(min_lr >= 0 && min_lr <= base_lr)) throw ConfigError("min_lr", "must lie in [0, base_lr]");
  if (!(warmup_epochs >= 0 && warmup_epochs < total_epochs)) {
    throw ConfigError("warmup_epochs", "must satisfy 0 <= warmup_epochs < epochs");
  }
  if (steps_per_epoch == 0) throw ConfigError("batch_size", "no steps per epoch");
}

double lr_at(const Schedule& s, std::size_t step) {
  const double spe = static_cast<double>(s.steps_per_epoch);
  const double warm = s.warmup_epochs * spe;
  const double total = s.total_epochs * spe;
  const double t = static_cast<double>(step);
  if (t < warm) return s.base_lr * t / warm;
  if (t >= total) return s.min_lr;
  const double progress = (t - warm) / (total - warm);
  return s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1 + std::cos(std::numbers::pi * progress));
}

double layerwise_lr(double base, std::size_t layer, std::size_t depth, double decay) {
  if (layer > depth) throw std::out_of_range("layerwise_lr: layer exceeds depth");
  return base * std::pow(decay, static_cast<double>(depth - layer));
}

std::size_t layer_id(const std::string& name, std::size_t enc_depth) {
  if (starts_with(name, "embed.")) return 0;
  if (starts_with(name, "enc.")) {
    const auto dot = name.find('.', 4);
    std::size_t i = 0;
    std::from_chars(name.data() + 4, name.data() + dot, i);
    return i + 1;
  }
  return enc_depth + 1;
}

TrainConfig TrainConfig::pretrain_defaults() { return TrainConfig{}; }

TrainConfig TrainConfig::finetune_defaults() {
  TrainConfig c;
  c.epochs = 50;
  c.warmup_epochs = 5;
  c.adamw = {0.9, 0.999, 1e-8, 0.1};
  c.model.drop_path_rate = 0.1;
  c.model.n_classes = synth::kNumMotionClasses;
  return c;
}

void TrainConfig::validate() const {
  model.validate();
  if (epochs == 0) throw ConfigError("epochs", "must be at least 1");
  if (batch_size == 0) throw ConfigError("batch_size", "must be at least 1");
  if (!(base_lr > 0)) throw ConfigError("lr", "must be positive");
  if (!(min_lr >= 0 && min_lr <= base_lr)) throw ConfigError("min_lr", "must lie in [0, lr]");
  if (!(warmup_epochs >= 0 && warmup_epochs < static_cast<double>(epochs))) {
    throw ConfigError("warmup_epochs", "must satisfy 0 <= warmup_epochs < epochs");
  }
  if (!(adamw.beta1 >= 0 && adamw.beta1 < 1)) throw ConfigError("beta1", "must lie in [0, 1)");
  if (!(adamw.beta2 >= 0 && adamw.beta2 < 1)) throw ConfigError("beta2", "must lie in [0, 1)");
  if (!(adamw.eps > 0)) throw ConfigError("adam_eps", "must be positive");
  if (!(adamw.weight_decay >= 0)) throw ConfigError("weight_decay", "must be nonnegative");
  if (!(rho > 0 && rho < 1)) throw ConfigError("rho", "must lie in (0, 1)");
  if (!(temperature > 0)) throw ConfigError("temperature", "must be positive");
  if (!(objective.lambda_cross >= 0)) throw ConfigError("lambda_cross", "must be nonnegative");
  if (n_source_views == 0) throw ConfigError("n_source_views", "must be at least 1");
  if (!(crop_scale_min > 0 && crop_scale_min <= 1)) throw ConfigError("crop_scale_min", "must lie in (0, 1]");
  if (!(layer_decay > 0 && layer_decay <= 1)) throw ConfigError("layer_decay", "must lie in (0, 1]");
  if (!(label_smoothing >= 0 && label_smoothing < 1)) throw ConfigError("label_smoothing", "must lie in [0, 1)");
}

std::size_t TrainConfig::steps_per_epoch(std::size_t n_samples) const {
  return (n_samples + batch_size - 1) / batch_size;
}

Schedule TrainConfig::schedule(std::size_t n_samples) const {
  Schedule s{base_lr, min_lr, warmup_epochs, static_cast<double>(epochs), steps_per_epoch(n_samples)};
  s.validate();
  return s;
}

PretrainResult pretrain(const synth::Dataset& data, const TrainConfig& cfg, const RunPaths& paths) {
  cfg.validate();
  const auto& hdr = data.header;
  const auto& pc = cfg.model.patch;
  if (data.samples.empty()) throw ConfigError("dataset", "contains no samples");
  if (hdr.n_views < 2) throw ConfigError("dataset", "pre-training needs at least 2 views per sample");
  if (cfg.n_source_views + 1 > hdr.n_views) {
    throw ConfigError("n_source_views", std::to_string(cfg.n_source_views) + " source views need " +
                                            std::to_string(cfg.n_source_views + 1) + " views, dataset has " +
                                            std::to_string(hdr.n_views));
  }
  check_geometry(hdr, pc);

  PretrainResult res;
  res.params = init_params<float>(cfg.model, cfg.seed, ParamSet::pretrain);
  std::size_t start_epoch = 0;
  if (!paths.resume.empty()) start_epoch = restore_training_state(load_checkpoint<float>(paths.resume), res.params, res.opt);
  Model<float> model(cfg.model, &res.params);

  const std::size_t n = data.samples.size();
  const std::size_t spe = cfg.steps_per_epoch(n);
  const auto sched = cfg.schedule(n);
  const std::size_t roles = cfg.n_source_views + 1;

  std::ofstream metrics;
  if (!paths.out_dir.empty()) {
    std::filesystem::create_directories(paths.out_dir);
    metrics = open_metrics(paths.out_dir / "metrics.tsv", "step\tlr\ttotal\tself_sv\tself_tv\tcross_tv",
                           start_epoch * spe, !paths.resume.empty());
  }

  for (std::size_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    const auto order = KeyedRng{cfg.seed, kShuffleStream, epoch}.permutation(n);
    double epoch_sum = 0;
    for_each_batch(n, cfg.batch_size, [&](std::size_t b0, std::size_t b1) {
      const std::size_t step = epoch * spe + b0 / cfg.batch_size;
      // role 0 = source view, role 1 = target view, then extra sources
      std::vector<std::vector<ClipTensor>> clips(roles);
      std::vector<std::vector<MaskPlan>> plans(roles);
      for (std::size_t i = b0; i < b1; ++i) {
        const auto& s = data.samples[order[i]];
        KeyedRng rng{cfg.seed, kPretrainAug, epoch, s.sample_id};
        const auto views = rng.permutation(hdr.n_views);
        const std::size_t start = rng.below(hdr.frames - pc.frames + 1);
        const auto crop = cfg.crop ? random_resized_crop(rng, hdr.height, hdr.width, cfg.crop_scale_min)
                                   : full_crop(hdr.height, hdr.width);
        for (std::size_t r = 0; r < roles; ++r) {
          clips[r].push_back(crop_clip(s.clips[views[r]], crop, start, pc.frames, pc.height, pc.width));
          plans[r].push_back(make_mask(cfg.mask, pc, cfg.rho, {cfg.seed, s.sample_id, epoch, views[r]}));
        }
      }
      std::vector<ViewBatch<float>> batches;
      for (std::size_t r = 0; r < roles; ++r) {
        batches.push_back(
            make_view_batch<float>(pointers(clips[r]), pc, std::move(plans[r]), cfg.motion_weighting, cfg.temperature));
      }
      const std::vector<ViewBatch<float>> extras(batches.begin() + 2, batches.end());

      const double lr = lr_at(sched, step);
      res.params.zero_grad();
      const auto rep = pretrain_loss(model, batches[0], batches[1], extras, cfg.objective);
      backward(rep.total);
      adamw_step(res.params, res.opt, cfg.adamw, lr);

      const PretrainRow row{step, lr, static_cast<double>(rep.total.item()), rep.self_sv, rep.self_tv, rep.cross_tv};
      epoch_sum += row.total;
      res.rows.push_back(row);
      if (metrics.is_open()) write_row(metrics, step, {row.lr, row.total, row.self_sv, row.self_tv, row.cross_tv});
    });
    res.epoch_mean_total.push_back(epoch_sum / static_cast<double>(spe));

    if (!paths.out_dir.empty()) {
      const bool last = epoch + 1 == cfg.epochs;
      const bool periodic = cfg.checkpoint_every != 0 && (epoch + 1) % cfg.checkpoint_every == 0;
      if (periodic || last) {
        const auto state = training_state(res.params, &res.opt, epoch + 1);
        if (periodic) save_checkpoint(paths.out_dir / ("checkpoint_epoch" + std::to_string(epoch + 1) + ".mv2c"), state);
        if (last) save_checkpoint(paths.out_dir / "checkpoint.mv2c", state);
      }
    }
  }
  return res;
}

CrossViewReport cross_view_reconstruction(const synth::Dataset& data, ModelParams<float>& params,
                                          const TrainConfig& cfg, std::uint64_t mask_epoch) {
  const auto& hdr = data.header;
  const auto& pc = cfg.model.patch;
  if (hdr.n_views < 2) throw ConfigError("dataset", "cross-view reconstruction needs 2 views");
  check_geometry(hdr, pc);
  NoGradGuard no_grad;
  Model<float> model(cfg.model, &params);
  const std::size_t start = (hdr.frames - pc.frames) / 2;
  const auto crop = full_crop(hdr.height, hdr.width);
  CrossViewReport rep;
  for_each_batch(data.samples.size(), cfg.batch_size, [&](std::size_t b0, std::size_t b1) {
    std::vector<ClipTensor> src, tgt;
    std::vector<MaskPlan> psrc, ptgt;
    for (std::size_t i = b0; i < b1; ++i) {
      const auto& s = data.samples[i];
      src.push_back(crop_clip(s.clips[0], crop, start, pc.frames, pc.height, pc.width));
      tgt.push_back(crop_clip(s.clips[1], crop, start, pc.frames, pc.height, pc.width));
      psrc.push_back(make_mask(cfg.mask, pc, cfg.rho, {cfg.seed, s.sample_id, mask_epoch, 0}));
      ptgt.push_back(make_mask(cfg.mask, pc, cfg.rho, {cfg.seed, s.sample_id, mask_epoch, 1}));
    }
    const auto sv = make_view_batch<float>(pointers(src), pc, psrc, false, cfg.temperature);
    const auto tv = make_view_batch<float>(pointers(tgt), pc, ptgt, false, cfg.temperature);
    const auto enc_sv = model.encoder_forward(split_tokens(model.tokenize(sv.inputs), sv.plans).visible);
    const auto enc_tv = model.encoder_forward(split_tokens(model.tokenize(tv.inputs), tv.plans).visible);
    const auto pred = model.cross_view_decoder(model.assemble_decoder_input(enc_tv, tv.plans), {enc_sv});
    const double nb = static_cast<double>(b1 - b0);
    rep.model_mse += nb * static_cast<double>(masked_mse(tv.targets, pred, tv.plans).item());
    rep.copy_mse += nb * static_cast<double>(masked_mse(tv.targets, sv.targets, tv.plans).item());
  });
  rep.model_mse /= static_cast<double>(data.samples.size());
  rep.copy_mse /= static_cast<double>(data.samples.size());
  return rep;
}

FinetuneResult finetune(const synth::Dataset& data, const TensorMap<float>* pretrained, const TrainConfig& cfg,
                        const RunPaths& paths) {
  cfg.validate();
  const auto& hdr = data.header;
  const auto& pc = cfg.model.patch;
  if (cfg.model.n_classes == 0) throw ConfigError("n_classes", "fine-tuning needs a class count");
  if (data.samples.empty()) throw ConfigError("dataset", "contains no samples");
  check_geometry(hdr, pc);
  for (const auto& s : data.samples) {
    if (s.label >= cfg.model.n_classes) {
      throw ConfigError("n_classes", "sample " + std::to_string(s.sample_id) + " has label " + std::to_string(s.label));
    }
  }

  FinetuneResult res;
  res.params = init_params<float>(cfg.model, cfg.seed, ParamSet::finetune);
  if (pretrained != nullptr) {
    for (auto& [name, t] : res.params.tensors())
      if (is_encoder_tensor(name)) copy_tensor(name, *pretrained, t, "checkpoint");
  }
  if (cfg.linear_probe) {
    for (auto& [name, t] : res.params.tensors())
      if (is_encoder_tensor(name)) t.set_requires_grad(false);
  }
  Model<float> model(cfg.model, &res.params);
  OptimState<float> opt;
  const std::size_t depth = cfg.model.enc_depth;
  const auto lr_scale = [&](const std::string& name) {
    return layerwise_lr(1.0, layer_id(name, depth), depth + 1, cfg.layer_decay);
  };

  const std::size_t n = data.samples.size();
  const std::size_t spe = cfg.steps_per_epoch(n);
  const auto sched = cfg.schedule(n);
  std::ofstream metrics;
  if (!paths.out_dir.empty()) {
    std::filesystem::create_directories(paths.out_dir);
    metrics = open_metrics(paths.out_dir / "metrics.tsv", "step\tlr\tce\tacc", 0, false);
  }

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = KeyedRng{cfg.seed, kShuffleStream, epoch}.permutation(n);
    for_each_batch(n, cfg.batch_size, [&](std::size_t b0, std::size_t b1) {
      const std::size_t step = epoch * spe + b0 / cfg.batch_size;
      std::vector<ClipTensor> clips;
      std::vector<std::uint32_t> labels;
      for (std::size_t i = b0; i < b1; ++i) {
        const auto& s = data.samples[order[i]];
        KeyedRng rng{cfg.seed, kFinetuneAug, epoch, s.sample_id};
        const auto view = rng.below(hdr.n_views);
        const std::size_t start = rng.below(hdr.frames - pc.frames + 1);
        auto crop = cfg.crop ? random_resized_crop(rng, hdr.height, hdr.width, cfg.crop_scale_min)
                             : full_crop(hdr.height, hdr.width);
        crop.flip = cfg.flip && rng.uniform() < 0.5;
        clips.push_back(crop_clip(s.clips[view], crop, start, pc.frames, pc.height, pc.width));
        labels.push_back(s.label);
      }
      const auto inputs = standardize_pixels(patchify_batch<float>(pointers(clips), pc));
      const double lr = lr_at(sched, step);
      res.params.zero_grad();
      const ForwardOptions fwd{true, splitmix64(cfg.seed ^ splitmix64(kDropPath + step))};
      const auto logits = model.classifier_forward(model.encoder_forward(model.tokenize(inputs), fwd));
      const auto loss = cross_entropy_smoothed(logits, labels, cfg.label_smoothing);
      backward(loss);
      adamw_step(res.params, opt, cfg.adamw, lr, lr_scale);

      const std::size_t K = cfg.model.n_classes;
      const auto lv = logits.data();
      std::size_t correct = 0;
      for (std::size_t b = 0; b < labels.size(); ++b) {
        std::vector<double> row(lv.begin() + static_cast<std::ptrdiff_t>(b * K),
                                lv.begin() + static_cast<std::ptrdiff_t>((b + 1) * K));
        correct += argmax(row) == labels[b];
      }
      const FinetuneRow row{step, lr, static_cast<double>(loss.item()),
                            static_cast<double>(correct) / static_cast<double>(labels.size())};
      res.rows.push_back(row);
      if (metrics.is_open()) write_row(metrics, step, {row.lr, row.loss, row.acc});
    });
  }
  if (!paths.out_dir.empty()) save_checkpoint(paths.out_dir / "checkpoint.mv2c", training_state(res.params, nullptr, 0));
  return res;
}

std::uint32_t argmax(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("argmax of an empty row");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return static_cast<std::uint32_t>(best);
}

FusedPredictions late_fuse(const std::vector<std::vector<std::vector<double>>>& per_sample_views) {
  FusedPredictions out;
  if (per_sample_views.empty()) return out;
  const std::size_t V = per_sample_views.front().size();
  if (V == 0) throw std::invalid_argument("late_fuse: sample without views");
  const std::size_t K = per_sample_views.front().front().size();
  for (std::size_t s = 0; s < per_sample_views.size(); ++s) {
    const auto& views = per_sample_views[s];
    if (views.size() != V) {
      throw std::invalid_argument("late_fuse: sample " + std::to_string(s) + " has " + std::to_string(views.size()) +
                                  " views, expected " + std::to_string(V));
    }
    std::vector<double> fused(K, 0.0);
    for (const auto& v : views) {
      if (v.size() != K) throw std::invalid_argument("late_fuse: class count differs between views");
      for (std::size_t k = 0; k < K; ++k) fused[k] += v[k];
    }
    for (auto& f : fused) f /= static_cast<double>(V);
    out.predictions.push_back(argmax(fused));
    out.logits.push_back(std::move(fused));
  }
  return out;
}

EvalResult evaluate(const synth::Dataset& data, ModelParams<float>& params, const ModelConfig& model_cfg,
                    const EvalConfig& cfg) {
  const auto& hdr = data.header;
  const auto& pc = model_cfg.patch;
  if (model_cfg.n_classes == 0) throw ConfigError("n_classes", "evaluation needs a classifier");
  check_geometry(hdr, pc);
  std::vector<std::uint32_t> views = cfg.views;
  if (views.empty())
    for (std::uint32_t v = 0; v < hdr.n_views; ++v) views.push_back(v);
  for (auto v : views)
    if (v >= hdr.n_views) throw ConfigError("views", "view " + std::to_string(v) + " not in dataset");
  const auto starts = temporal_starts(hdr.frames, pc.frames, cfg.n_clips);
  const auto crops = test_crops(hdr.height, hdr.width, cfg.n_crops);
  const std::size_t per_view = starts.size() * crops.size();
  const std::size_t K = model_cfg.n_classes;

  NoGradGuard no_grad;
  Model<float> model(model_cfg, &params);
  EvalResult res;
  for (const auto& s : data.samples) {
    std::vector<ClipTensor> clips;
    for (auto v : views)
      for (auto start : starts)
        for (const auto& crop : crops) clips.push_back(crop_clip(s.clips[v], crop, start, pc.frames, pc.height, pc.width));
    const auto inputs = standardize_pixels(patchify_batch<float>(pointers(clips), pc));
    const auto out = model.classifier_forward(model.encoder_forward(model.tokenize(inputs)));
    const auto logits = out.data();
    std::vector<std::vector<double>> vl(views.size(), std::vector<double>(K, 0.0));
    for (std::size_t vi = 0; vi < views.size(); ++vi) {
      for (std::size_t j = 0; j < per_view; ++j)
        for (std::size_t k = 0; k < K; ++k) vl[vi][k] += static_cast<double>(logits[(vi * per_view + j) * K + k]);
      for (auto& x : vl[vi]) x /= static_cast<double>(per_view);
    }
    res.sample_ids.push_back(s.sample_id);
    res.labels.push_back(s.label);
    res.view_logits.push_back(std::move(vl));
  }
  auto fused = late_fuse(res.view_logits);
  res.logits = std::move(fused.logits);
  res.predictions = std::move(fused.predictions);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < res.labels.size(); ++i) correct += res.predictions[i] == res.labels[i];
  res.accuracy = res.labels.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(res.labels.size());
  return res;
}

void write_logits_tsv(const std::filesystem::path& path, const EvalResult& result) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "sample_id\tlabel\tprediction";
  const std::size_t K = result.logits.empty() ? 0 : result.logits.front().size();
  for (std::size_t k = 0; k < K; ++k) out << "\tlogit_" << k;
  out << '\n';
  for (std::size_t i = 0; i < result.logits.size(); ++i) {
    out << result.sample_ids[i] << '\t' << result.labels[i] << '\t' << result.predictions[i];
    for (double v : result.logits[i]) out << '\t' << format_number(v);
    out << '\n';
  }
}

template void adamw_step(ModelParams<float>&, OptimState<float>&, const AdamWConfig&, double,
                         const std::function<double(const std::string&)>&);
template void adamw_step(ModelParams<double>&, OptimState<double>&, const AdamWConfig&, double,
                         const std::function<double(const std::string&)>&);

}  // namespace mv2mae
