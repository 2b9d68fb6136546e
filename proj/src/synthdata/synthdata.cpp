#include "mv2mae/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "common/binary_io.hpp"
#include "mv2mae/rng.hpp"

namespace mv2mae::synth {

namespace {

constexpr char kMagic[4] = {'M', 'V', '2', 'D'};
constexpr std::uint32_t kVersion = 1;
constexpr double kRingRadius = 6.0;
constexpr double kCameraHeight = 0.8;

Vec3 sub(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
Vec3 normalized(const Vec3& a) {
  const double n = std::sqrt(dot(a, a));
  return {a[0] / n, a[1] / n, a[2] / n};
}

struct Frame {
  Vec3 right, down, forward;
};

Frame camera_frame(const CameraSpec& cam) {
  if (!(cam.focal > 0)) throw GenerationError("camera focal length must be positive");
  const Vec3 fwd = sub(cam.look_at, cam.position);
  if (dot(fwd, fwd) == 0) throw GenerationError("camera look_at coincides with position");
  const Vec3 f = normalized(fwd);
  const Vec3 r = cross(cam.up, f);
  if (dot(r, r) < 1e-18) throw GenerationError("camera up vector is parallel to the viewing direction");
  Frame fr;
  fr.forward = f;
  fr.right = normalized(r);
  fr.down = cross(fr.right, f);
  return fr;
}

// Ray parameter of the nearest hit; the ray direction has unit forward
// component so the parameter equals camera-frame depth.
double intersect(const Primitive& p, const Vec3& origin, const Vec3& dir) {
  constexpr double kMiss = std::numeric_limits<double>::infinity();
  if (p.shape == Shape3::sphere) {
    const Vec3 oc = sub(origin, p.center);
    const double a = dot(dir, dir);
    const double b = 2 * dot(dir, oc);
    const double c = dot(oc, oc) - p.size * p.size;
    const double disc = b * b - 4 * a * c;
    if (disc < 0) return kMiss;
    const double s = (-b - std::sqrt(disc)) / (2 * a);
    return s > 0 ? s : kMiss;
  }
  double tmin = -kMiss, tmax = kMiss;
  for (int i = 0; i < 3; ++i) {
    const double lo = p.center[i] - p.size - origin[i];
    const double hi = p.center[i] + p.size - origin[i];
    if (dir[i] == 0) {
      if (lo > 0 || hi < 0) return kMiss;
      continue;
    }
    double t1 = lo / dir[i], t2 = hi / dir[i];
    if (t1 > t2) std::swap(t1, t2);
    tmin = std::max(tmin, t1);
    tmax = std::min(tmax, t2);
  }
  if (tmax < std::max(tmin, 0.0)) return kMiss;
  return tmin > 0 ? tmin : kMiss;
}

double triangle_wave(double x) {
  const double f = x - std::floor(x);
  return f < 0.5 ? 4 * f - 1 : 3 - 4 * f;
}

}  // namespace

const char* motion_name(MotionKind kind) {
  switch (kind) {
    case MotionKind::translate_x: return "translate_x";
    case MotionKind::translate_y: return "translate_y";
    case MotionKind::translate_z: return "translate_z";
    case MotionKind::circle_xy: return "circle_xy";
    case MotionKind::oscillate_x: return "oscillate_x";
    case MotionKind::still: return "still";
    case MotionKind::zigzag: return "zigzag";
    case MotionKind::scale_pulse: return "scale_pulse";
  }
  return "unknown";
}

Projection project_point(const CameraSpec& cam, const Vec3& p) {
  const Frame fr = camera_frame(cam);
  const Vec3 rel = sub(p, cam.position);
  const double z = dot(rel, fr.forward);
  if (!(z > 0)) throw GenerationError("point is behind the camera (depth " + std::to_string(z) + ")");
  return {cam.focal * dot(rel, fr.right) / z + cam.principal_point[0],
          cam.focal * dot(rel, fr.down) / z + cam.principal_point[1], z};
}

std::vector<CameraSpec> ring_cameras(std::size_t n_views, std::size_t height, std::size_t width) {
  std::vector<CameraSpec> cams;
  for (std::size_t k = 0; k < n_views; ++k) {
    const double az = static_cast<double>(k) * std::numbers::pi / 6;
    CameraSpec c;
    c.position = {kRingRadius * std::sin(az), kCameraHeight, -kRingRadius * std::cos(az)};
    c.look_at = {0, 0, 0};
    c.up = {0, 1, 0};
    c.focal = 1.1 * static_cast<double>(width);
    c.principal_point = {static_cast<double>(width) / 2, static_cast<double>(height) / 2};
    c.height = height;
    c.width = width;
    cams.push_back(c);
  }
  return cams;
}

Primitive actor_at(const SceneSpec& scene, double time) {
  Primitive p = scene.primitives.at(scene.actor_index);
  const auto& tr = scene.trajectory;
  const double s = time / tr.period;
  const double a = tr.amplitude;
  const double w = 2 * std::numbers::pi * s + tr.phase;
  Vec3 d{0, 0, 0};
  switch (tr.kind) {
    case MotionKind::translate_x: d[0] = tr.direction * a * (2 * s - 1); break;
    case MotionKind::translate_y: d[1] = tr.direction * a * (2 * s - 1); break;
    case MotionKind::translate_z: d[2] = tr.direction * a * (2 * s - 1); break;
    case MotionKind::circle_xy:
      d[0] = 0.7 * a * std::cos(tr.direction * 2 * std::numbers::pi * s + tr.phase);
      d[1] = 0.7 * a * std::sin(tr.direction * 2 * std::numbers::pi * s + tr.phase);
      break;
    case MotionKind::oscillate_x: d[0] = a * std::sin(w); break;
    case MotionKind::still: break;
    case MotionKind::zigzag:
      d[0] = tr.direction * a * (2 * s - 1);
      d[1] = 0.4 * a * triangle_wave(2 * s + tr.phase / (2 * std::numbers::pi));
      break;
    case MotionKind::scale_pulse: p.size *= 1 + 0.45 * std::sin(w); break;
  }
  for (int i = 0; i < 3; ++i) p.center[i] += d[i];
  return p;
}

RenderedClip render_clip(const SceneSpec& scene, const CameraSpec& cam, std::size_t frames, double dt) {
  if (frames < 2) throw std::invalid_argument("render_clip: need at least 2 frames");
  if (scene.actor_index >= scene.primitives.size()) throw std::invalid_argument("render_clip: actor index out of range");
  const Frame fr = camera_frame(cam);
  const std::size_t H = cam.height, W = cam.width;
  RenderedClip out;
  out.clip = ClipTensor::zeros(3, frames, H, W);
  out.motion_mask.assign(frames * H * W, 0);
  out.silhouette.assign(frames * H * W, 0);
  std::vector<std::uint8_t> visible(frames * H * W, 0);

  std::vector<Primitive> prims = scene.primitives;
  for (std::size_t t = 0; t < frames; ++t) {
    prims[scene.actor_index] = actor_at(scene, static_cast<double>(t) * dt);
    for (const auto& p : prims) project_point(cam, p.center);  // throws if behind
    std::size_t actor_px = 0;
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        const double px = (static_cast<double>(x) + 0.5 - cam.principal_point[0]) / cam.focal;
        const double py = (static_cast<double>(y) + 0.5 - cam.principal_point[1]) / cam.focal;
        Vec3 dir;
        for (int i = 0; i < 3; ++i) dir[i] = fr.right[i] * px + fr.down[i] * py + fr.forward[i];
        double best = std::numeric_limits<double>::infinity();
        std::size_t hit = prims.size();
        for (std::size_t k = 0; k < prims.size(); ++k) {
          const double s = intersect(prims[k], cam.position, dir);
          if (s < best) {
            best = s;
            hit = k;
          }
        }
        if (std::isfinite(intersect(prims[scene.actor_index], cam.position, dir))) {
          out.silhouette[(t * H + y) * W + x] = 1;
        }
        const Rgb& c = hit == prims.size() ? scene.background : prims[hit].color;
        for (std::size_t ch = 0; ch < 3; ++ch) out.clip.at(ch, t, y, x) = c[ch];
        if (hit == scene.actor_index) {
          visible[(t * H + y) * W + x] = 1;
          ++actor_px;
        }
      }
    }
    if (actor_px == 0) throw GenerationError("actor left the camera frustum at frame " + std::to_string(t));
  }
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t i = 0; i < H * W; ++i)
      out.motion_mask[t * H * W + i] = visible[t * H * W + i] | (t > 0 ? visible[(t - 1) * H * W + i] : 0);
  return out;
}

std::vector<std::size_t> stratified_counts(std::size_t n, const std::vector<double>& mix) {
  if (mix.empty()) throw std::invalid_argument("class mix is empty");
  const double total = std::accumulate(mix.begin(), mix.end(), 0.0);
  if (!(total > 0)) throw std::invalid_argument("class mix must have positive total weight");
  std::vector<std::size_t> counts(mix.size());
  std::vector<std::pair<double, std::size_t>> rema;
  std::size_t assigned = 0;
  for (std::size_t k = 0; k < mix.size(); ++k) {
    if (mix[k] < 0) throw std::invalid_argument("class mix weights must be nonnegative");
    const double exact = static_cast<double>(n) * mix[k] / total;
    counts[k] = static_cast<std::size_t>(std::floor(exact));
    assigned += counts[k];
    rema.emplace_back(exact - std::floor(exact), k);
  }
  // Largest remainder; ties go to the lower class index.
  std::stable_sort(rema.begin(), rema.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < n; ++i, ++assigned) ++counts[rema[i % rema.size()].second];
  return counts;
}

SceneSpec sample_scene(std::uint64_t seed, std::uint32_t sample_id, std::uint32_t attempt, MotionKind kind) {
  KeyedRng rng{seed, sample_id, attempt, 0x5ce4e};
  auto color = [&](double lo, double hi) {
    return Rgb{static_cast<float>(rng.uniform(lo, hi)), static_cast<float>(rng.uniform(lo, hi)),
               static_cast<float>(rng.uniform(lo, hi))};
  };
  SceneSpec scene;
  scene.background = color(0.05, 0.35);

  Primitive actor;
  actor.shape = rng.uniform() < 0.5 ? Shape3::sphere : Shape3::box;
  actor.center = {rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2)};
  actor.size = rng.uniform(0.4, 0.55);
  actor.color = color(0.6, 1.0);
  scene.primitives.push_back(actor);
  scene.actor_index = 0;

  // Static props on the far side of the origin from the default camera arc.
  for (int k = 0; k < 2; ++k) {
    Primitive p;
    p.shape = rng.uniform() < 0.5 ? Shape3::sphere : Shape3::box;
    const double az = rng.uniform(205.0, 245.0) * std::numbers::pi / 180;
    const double r = rng.uniform(2.8, 3.2);
    p.center = {r * std::sin(az), rng.uniform(-0.8, 0.8), -r * std::cos(az)};
    p.size = rng.uniform(0.3, 0.45);
    p.color = color(0.2, 0.9);
    scene.primitives.push_back(p);
  }

  scene.trajectory.kind = kind;
  scene.trajectory.amplitude = rng.uniform(0.6, 1.0);
  scene.trajectory.period = 1.0;
  scene.trajectory.phase = rng.uniform(0, 2 * std::numbers::pi);
  scene.trajectory.direction = rng.uniform() < 0.5 ? -1.0 : 1.0;
  return scene;
}

MultiViewSample generate_sample(const GenerateOptions& opts, std::uint32_t sample_id, std::uint32_t label) {
  if (label >= kNumMotionClasses) throw std::invalid_argument("label out of range");
  const auto cams = ring_cameras(opts.n_views, opts.height, opts.width);
  const double dt = 1.0 / static_cast<double>(opts.frames - 1);
  for (std::uint32_t attempt = 0; attempt < 64; ++attempt) {
    const SceneSpec scene = sample_scene(opts.seed, sample_id, attempt, static_cast<MotionKind>(label));
    try {
      MultiViewSample s;
      s.label = label;
      s.sample_id = sample_id;
      s.seed = splitmix64(opts.seed ^ splitmix64(sample_id)) ^ attempt;
      for (std::size_t v = 0; v < cams.size(); ++v) {
        auto r = render_clip(scene, cams[v], opts.frames, dt);
        r.clip.view_id = static_cast<std::uint32_t>(v);
        r.clip.sample_id = sample_id;
        r.clip.label = label;
        s.clips.push_back(std::move(r.clip));
        s.motion_masks.push_back(std::move(r.motion_mask));
      }
      return s;
    } catch (const GenerationError&) {
      continue;
    }
  }
  throw GenerationError("could not place a visible actor for sample " + std::to_string(sample_id));
}

Dataset generate_dataset(const GenerateOptions& opts) {
  if (opts.n_views < 2) throw std::invalid_argument("generate_dataset: need at least 2 views");
  if (opts.frames < 2) throw std::invalid_argument("generate_dataset: need at least 2 frames");
  if (opts.class_mix.size() > kNumMotionClasses) throw std::invalid_argument("generate_dataset: too many classes");
  const auto counts = stratified_counts(opts.n_samples, opts.class_mix);
  std::vector<std::uint32_t> labels;
  for (std::size_t k = 0; k < counts.size(); ++k) labels.insert(labels.end(), counts[k], static_cast<std::uint32_t>(k));
  KeyedRng shuffle{opts.seed, 0x1abe1};
  const auto perm = shuffle.permutation(labels.size());

  Dataset ds;
  ds.header = {static_cast<std::uint32_t>(opts.n_samples), static_cast<std::uint32_t>(opts.n_views),
               static_cast<std::uint32_t>(opts.frames),    static_cast<std::uint32_t>(opts.height),
               static_cast<std::uint32_t>(opts.width),     3};
  ds.samples.reserve(opts.n_samples);
  for (std::size_t i = 0; i < opts.n_samples; ++i) {
    ds.samples.push_back(generate_sample(opts, static_cast<std::uint32_t>(i), labels[perm[i]]));
  }
  return ds;
}

void write_dataset(const Dataset& ds, const std::filesystem::path& path) {
  io::Writer w;
  w.bytes(kMagic, 4);
  w.put<std::uint32_t>(kVersion);
  const auto& h = ds.header;
  for (auto v : {h.n_samples, h.n_views, h.frames, h.height, h.width, h.channels}) w.put<std::uint32_t>(v);
  const std::size_t clip_len = std::size_t{h.channels} * h.frames * h.height * h.width;
  const std::size_t mask_len = std::size_t{h.frames} * h.height * h.width;
  for (const auto& s : ds.samples) {
    if (s.clips.size() != h.n_views || s.motion_masks.size() != h.n_views) {
      throw std::invalid_argument("write_dataset: sample view count does not match header");
    }
    w.put<std::uint32_t>(s.label);
    w.put<std::uint64_t>(s.seed);
    for (const auto& c : s.clips) {
      if (c.pixels.size() != clip_len) throw std::invalid_argument("write_dataset: clip size does not match header");
      w.put_span<float>(c.pixels);
    }
    for (const auto& m : s.motion_masks) {
      if (m.size() != mask_len) throw std::invalid_argument("write_dataset: mask size does not match header");
      w.put_span<std::uint8_t>(m);
    }
  }
  w.save(path);
}

Dataset read_dataset(const std::filesystem::path& path) {
  io::Reader r(path);
  char magic[4];
  r.bytes(magic, 4);
  if (!std::equal(magic, magic + 4, kMagic)) throw io::IoError("not a dataset file (bad magic): " + path.string());
  if (const auto v = r.get<std::uint32_t>(); v != kVersion) {
    throw io::IoError("unsupported dataset version " + std::to_string(v) + ": " + path.string());
  }
  Dataset ds;
  auto& h = ds.header;
  h.n_samples = r.get<std::uint32_t>();
  h.n_views = r.get<std::uint32_t>();
  h.frames = r.get<std::uint32_t>();
  h.height = r.get<std::uint32_t>();
  h.width = r.get<std::uint32_t>();
  h.channels = r.get<std::uint32_t>();
  const std::size_t mask_len = std::size_t{h.frames} * h.height * h.width;
  ds.samples.resize(h.n_samples);
  for (std::uint32_t i = 0; i < h.n_samples; ++i) {
    auto& s = ds.samples[i];
    s.sample_id = i;
    s.label = r.get<std::uint32_t>();
    s.seed = r.get<std::uint64_t>();
    for (std::uint32_t v = 0; v < h.n_views; ++v) {
      auto c = ClipTensor::zeros(h.channels, h.frames, h.height, h.width);
      r.get_span<float>(c.pixels);
      c.view_id = v;
      c.sample_id = i;
      c.label = s.label;
      s.clips.push_back(std::move(c));
    }
    for (std::uint32_t v = 0; v < h.n_views; ++v) {
      std::vector<std::uint8_t> m(mask_len);
      r.get_span<std::uint8_t>(m);
      s.motion_masks.push_back(std::move(m));
    }
  }
  if (!r.at_end()) throw io::IoError("trailing bytes in dataset file: " + path.string());
  return ds;
}

}  // namespace mv2mae::synth
