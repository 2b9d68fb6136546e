#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "mv2mae/cli.hpp"
#include "mv2mae/errors.hpp"
#include "mv2mae/gradcheck.hpp"
#include "mv2mae/masking.hpp"
#include "mv2mae/objective.hpp"
#include "mv2mae/synthdata.hpp"
#include "mv2mae/tokenizer.hpp"
#include "mv2mae/training.hpp"

namespace py = pybind11;
using namespace mv2mae;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

ClipTensor clip_from(const FloatArray& a) {
  if (a.ndim() != 4) throw py::value_error("clip must have shape (channels, frames, height, width)");
  auto c = ClipTensor::zeros(a.shape(0), a.shape(1), a.shape(2), a.shape(3));
  std::copy(a.data(), a.data() + a.size(), c.pixels.begin());
  return c;
}

FloatArray array_of(const std::vector<std::size_t>& shape, const float* data) {
  FloatArray out(std::vector<py::ssize_t>(shape.begin(), shape.end()));
  std::copy(data, data + out.size(), out.mutable_data());
  return out;
}

PatchConfig patch_for(const ClipTensor& c, std::size_t t, std::size_t h, std::size_t w) {
  PatchConfig pc{t, h, w, c.frames, c.height, c.width, c.channels};
  pc.validate();
  return pc;
}

py::tuple dataset_arrays(const synth::Dataset& ds) {
  const auto& h = ds.header;
  FloatArray clips({static_cast<py::ssize_t>(h.n_samples), static_cast<py::ssize_t>(h.n_views), py::ssize_t{3},
                    static_cast<py::ssize_t>(h.frames), static_cast<py::ssize_t>(h.height),
                    static_cast<py::ssize_t>(h.width)});
  py::array_t<std::uint32_t> labels(static_cast<py::ssize_t>(h.n_samples));
  float* dst = clips.mutable_data();
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    labels.mutable_at(i) = ds.samples[i].label;
    for (const auto& c : ds.samples[i].clips) dst = std::copy(c.pixels.begin(), c.pixels.end(), dst);
  }
  return py::make_tuple(clips, labels);
}

}  // namespace

PYBIND11_MODULE(_mv2mae, m) {
  m.doc() = "Multi-view masked video autoencoder on synthetic scenes";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

  m.def(
      "generate_dataset",
      [](std::uint64_t seed, std::size_t samples, std::size_t views, std::size_t frames, std::size_t size,
         const std::string& path) {
        synth::GenerateOptions g;
        g.seed = seed;
        g.n_samples = samples;
        g.n_views = views;
        g.frames = frames;
        g.height = g.width = size;
        const auto ds = synth::generate_dataset(g);
        if (!path.empty()) synth::write_dataset(ds, path);
        return dataset_arrays(ds);
      },
      py::arg("seed"), py::arg("samples"), py::arg("views") = 2, py::arg("frames") = 16, py::arg("size") = 64,
      py::arg("path") = "",
      "Renders a synthetic multi-view dataset. Returns (clips[S, V, 3, T, H, W], labels[S]); writes it to `path` "
      "when given.");
  m.def(
      "load_dataset", [](const std::string& path) { return dataset_arrays(synth::read_dataset(path)); },
      py::arg("path"));

  m.def(
      "patchify",
      [](const FloatArray& clip, std::size_t t, std::size_t h, std::size_t w) {
        const auto c = clip_from(clip);
        const auto p = patchify<float>(c, patch_for(c, t, h, w));
        const auto d = p.data();
        return array_of(p.shape(), d.data());
      },
      py::arg("clip"), py::arg("t_patch") = 2, py::arg("h_patch") = 16, py::arg("w_patch") = 16);
  m.def(
      "unpatchify",
      [](const FloatArray& patches, std::size_t frames, std::size_t height, std::size_t width, std::size_t t,
         std::size_t h, std::size_t w) {
        if (patches.ndim() != 2) throw py::value_error("patches must have shape (tokens, patch_dim)");
        PatchConfig pc{t, h, w, frames, height, width, 3};
        pc.validate();
        const Tensor<float> p({static_cast<std::size_t>(patches.shape(0)), static_cast<std::size_t>(patches.shape(1))},
                              std::vector<float>(patches.data(), patches.data() + patches.size()));
        const auto c = unpatchify<float>(p, pc);
        return array_of({c.channels, c.frames, c.height, c.width}, c.pixels.data());
      },
      py::arg("patches"), py::arg("frames"), py::arg("height"), py::arg("width"), py::arg("t_patch") = 2,
      py::arg("h_patch") = 16, py::arg("w_patch") = 16);

  m.def(
      "random_mask",
      [](std::size_t n, double rho, std::array<std::uint64_t, 4> key) {
        const auto p = random_mask(n, rho, {key[0], key[1], key[2], key[3]});
        return py::make_tuple(p.masked, p.visible);
      },
      py::arg("num_tokens"), py::arg("rho"), py::arg("key") = std::array<std::uint64_t, 4>{0, 0, 0, 0},
      "Returns (masked, visible) sorted token indices.");
  m.def(
      "tube_mask",
      [](std::array<std::size_t, 3> grid, double rho, std::array<std::uint64_t, 4> key) {
        const auto p = tube_mask(grid, rho, {key[0], key[1], key[2], key[3]});
        return py::make_tuple(p.masked, p.visible);
      },
      py::arg("grid"), py::arg("rho"), py::arg("key") = std::array<std::uint64_t, 4>{0, 0, 0, 0});

  m.def(
      "motion_weights",
      [](const FloatArray& clip, std::size_t t, std::size_t h, std::size_t w, double temperature) {
        const auto c = clip_from(clip);
        return softmax_weights(frame_difference_norms(c, patch_for(c, t, h, w)), temperature);
      },
      py::arg("clip"), py::arg("t_patch") = 2, py::arg("h_patch") = 16, py::arg("w_patch") = 16,
      py::arg("temperature") = 60.0);

  m.def("late_fuse", [](const std::vector<std::vector<std::vector<double>>>& logits) {
    auto f = late_fuse(logits);
    return py::make_tuple(f.logits, f.predictions);
  });
  m.def("lr_at", [](double base, double min, double warmup, double total, std::size_t steps_per_epoch,
                    std::size_t step) { return lr_at(Schedule{base, min, warmup, total, steps_per_epoch}, step); });
  m.def("layerwise_lr", &layerwise_lr, py::arg("base"), py::arg("layer"), py::arg("depth"), py::arg("decay"));

  m.def(
      "gradcheck",
      [](const std::string& dtype, std::uint64_t seed) {
        GradcheckOptions opts;
        opts.seed = seed;
        GradcheckReport r;
        {
          py::gil_scoped_release release;
          if (dtype == "f64") r = run_gradcheck<double>(opts);
          else if (dtype == "f32") r = run_gradcheck<float>(opts);
          else throw ConfigError("dtype", "expected f64 or f32");
        }
        py::dict errors;
        for (const auto& e : r.primitives) errors[py::str(e.name)] = e.rel_error;
        for (const auto& e : r.model_groups) errors[py::str("model." + e.name)] = e.rel_error;
        return py::make_tuple(r.pass, errors);
      },
      py::arg("dtype") = "f64", py::arg("seed") = 0, "Returns (passed, {check: relative error}).");

  m.def(
      "run",
      [](const std::string& command, const std::map<std::string, std::string>& options) {
        std::vector<std::pair<std::string, std::string>> entries(options.begin(), options.end());
        const auto cfg = cli::resolve(command, entries);
        std::ostringstream out;
        int code = 0;
        {
          py::gil_scoped_release release;
          code = cli::run_command(cfg, out);
        }
        return py::make_tuple(code, out.str());
      },
      py::arg("command"), py::arg("options") = std::map<std::string, std::string>{},
      "Runs a CLI command in-process with key=value options. Returns (exit_code, output).");
  m.def("dump_config", [](const std::string& command, const std::map<std::string, std::string>& options) {
    std::vector<std::pair<std::string, std::string>> entries(options.begin(), options.end());
    return cli::dump_config(cli::resolve(command, entries));
  }, py::arg("command"), py::arg("options") = std::map<std::string, std::string>{});
}
