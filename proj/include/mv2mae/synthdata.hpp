#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "mv2mae/clip.hpp"

namespace mv2mae::synth {

using Vec3 = std::array<double, 3>;
using Rgb = std::array<float, 3>;

/// Thrown when a scene cannot be rendered as requested (point behind the
/// camera, actor out of every view). Generators resample on this error.
class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CameraSpec {
  Vec3 position{0, 0, 0};
  Vec3 look_at{0, 0, 1};
  Vec3 up{0, 1, 0};
  double focal = 100;
  std::array<double, 2> principal_point{64, 64};
  std::size_t height = 128;
  std::size_t width = 128;
};

/// Pixel coordinates and camera-frame depth of a projected point.
struct Projection {
  double u = 0;
  double v = 0;
  double depth = 0;
};

/// Pinhole projection in the camera frame (x right, y down, z forward).
Projection project_point(const CameraSpec& cam, const Vec3& p);

/// Cameras on a horizontal ring of radius 6 at 30 degree azimuth steps,
/// all looking at the origin.
std::vector<CameraSpec> ring_cameras(std::size_t n_views, std::size_t height, std::size_t width);

enum class MotionKind : std::uint32_t {
  translate_x = 0,
  translate_y,
  translate_z,
  circle_xy,
  oscillate_x,
  still,
  zigzag,
  scale_pulse,
};
inline constexpr std::size_t kNumMotionClasses = 8;
const char* motion_name(MotionKind kind);

struct Trajectory {
  MotionKind kind = MotionKind::still;
  double amplitude = 0.8;
  double period = 1.0;  // time units; translations span one period
  double phase = 0;
  double direction = 1;  // +1 or -1
};

enum class Shape3 : std::uint8_t { sphere, box };

struct Primitive {
  Shape3 shape = Shape3::sphere;
  Vec3 center{0, 0, 0};
  double size = 0.5;  // sphere radius or box half-extent
  Rgb color{1, 1, 1};
};

struct SceneSpec {
  std::vector<Primitive> primitives;
  std::size_t actor_index = 0;
  Trajectory trajectory;
  Rgb background{0.2f, 0.2f, 0.2f};
};

/// The actor primitive posed at time `time`.
Primitive actor_at(const SceneSpec& scene, double time);

struct RenderedClip {
  ClipTensor clip;
  /// T x H x W, 1 where the actor is visible in this or the previous frame.
  std::vector<std::uint8_t> motion_mask;
  /// T x H x W actor footprint ignoring occluders.
  std::vector<std::uint8_t> silhouette;
};

/// Z-buffered rasterization of every primitive over `frames` time steps.
RenderedClip render_clip(const SceneSpec& scene, const CameraSpec& cam, std::size_t frames, double dt);

struct MultiViewSample {
  std::vector<ClipTensor> clips;
  std::vector<std::vector<std::uint8_t>> motion_masks;
  std::uint32_t label = 0;
  std::uint32_t sample_id = 0;
  std::uint64_t seed = 0;
};

struct DatasetHeader {
  std::uint32_t n_samples = 0;
  std::uint32_t n_views = 0;
  std::uint32_t frames = 0;
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::uint32_t channels = 3;
};

struct Dataset {
  DatasetHeader header;
  std::vector<MultiViewSample> samples;
};

struct GenerateOptions {
  std::uint64_t seed = 0;
  std::size_t n_samples = 0;
  std::size_t n_views = 2;
  /// Relative class frequencies; index = label. Counts are assigned by
  /// largest remainder, not sampled.
  std::vector<double> class_mix = std::vector<double>(kNumMotionClasses, 1.0);
  std::size_t frames = 16;
  std::size_t height = 64;
  std::size_t width = 64;
};

/// Exact per-class counts for `n` samples under `mix`.
std::vector<std::size_t> stratified_counts(std::size_t n, const std::vector<double>& mix);

/// Scene parameters drawn from the generator keyed by (seed, sample_id, attempt).
SceneSpec sample_scene(std::uint64_t seed, std::uint32_t sample_id, std::uint32_t attempt, MotionKind kind);

/// Renders one synchronized sample, resampling the scene on generation errors.
MultiViewSample generate_sample(const GenerateOptions& opts, std::uint32_t sample_id, std::uint32_t label);

Dataset generate_dataset(const GenerateOptions& opts);

void write_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset read_dataset(const std::filesystem::path& path);

}  // namespace mv2mae::synth
