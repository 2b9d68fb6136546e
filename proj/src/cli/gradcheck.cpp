#include "mv2mae/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "mv2mae/model.hpp"
#include "mv2mae/objective.hpp"
#include "mv2mae/rng.hpp"
#include "mv2mae/synthdata.hpp"
#include "mv2mae/tensor.hpp"

namespace mv2mae {

namespace {

// Reference derivatives are always double-precision central differences taken
// at the same (possibly float-rounded) point.
constexpr double kPrimitiveStep = 1e-6, kPrimitiveFloor = 1e-7;
constexpr double kModelStep = 1e-5, kModelFloor = 1e-6;

template <class T>
struct Tolerance;
template <>
struct Tolerance<double> {
  static constexpr double primitive = 1e-6, model = 1e-4;
};
template <>
struct Tolerance<float> {
  static constexpr double primitive = 1e-2, model = 1e-2;
};

Tensor<double> random_tensor(KeyedRng& rng, const Shape& shape, double stddev = 1.0, double offset = 0.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = offset + stddev * rng.normal();
  return Tensor<double>(shape, std::move(v));
}

template <class To, class From>
Tensor<To> cast(const Tensor<From>& x) {
  return Tensor<To>(x.shape(), std::vector<To>(x.data().begin(), x.data().end()));
}

template <class T>
using Fn = std::function<Tensor<T>(const std::vector<Tensor<T>>&)>;

template <class T>
struct Case {
  std::string name;
  std::vector<Tensor<double>> inputs;
  Fn<T> f;
  Fn<double> reference;
};

template <class T, class G>
Case<T> make_case(std::string name, std::vector<Tensor<double>> inputs, G g) {
  return {std::move(name), std::move(inputs), Fn<T>([g](const std::vector<Tensor<T>>& x) { return g(x); }),
          Fn<double>([g](const std::vector<Tensor<double>>& x) { return g(x); })};
}

// Worst per-input error of d/dx sum(f(x) * r) for a fixed random r.
template <class T>
double check_function(const Case<T>& c, KeyedRng& rng) {
  std::vector<Tensor<T>> xs;
  std::vector<Tensor<double>> base;
  for (const auto& x : c.inputs) {
    xs.push_back(cast<T>(x));
    xs.back().set_requires_grad(true);
    base.push_back(cast<double>(xs.back()));
  }
  const auto y = c.f(xs);
  const auto r = random_tensor(rng, y.shape());
  backward(sum(mul(y, cast<T>(r))));
  double worst = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const auto g = xs[i].grad();
    const std::vector<double> analytic(g.begin(), g.end());
    const auto objective = [&](std::span<const double> theta) {
      NoGradGuard no_grad;
      auto in = base;
      in[i] = Tensor<double>(base[i].shape(), std::vector<double>(theta.begin(), theta.end()));
      return sum(mul(c.reference(in), r)).item();
    };
    const std::vector<double> theta(base[i].data().begin(), base[i].data().end());
    const auto numeric = finite_diff_grad(objective, theta, kPrimitiveStep);
    worst = std::max(worst, gradient_error(analytic, numeric, kPrimitiveFloor));
  }
  return worst;
}

template <class X>
using Elem = typename std::decay_t<X>::value_type::value_type;

template <class T>
std::vector<GradcheckEntry> check_primitives(std::uint64_t seed, double tol) {
  KeyedRng rng{seed, 0x9c};
  auto rt = [&](Shape s, double sd = 1.0, double off = 0.0) { return random_tensor(rng, s, sd, off); };
  std::vector<Case<T>> cases;
  cases.push_back(make_case<T>("add", {rt({2, 3, 4}), rt({3, 4})}, [](const auto& x) { return add(x[0], x[1]); }));
  cases.push_back(make_case<T>("add_broadcast", {rt({2, 1, 4}), rt({2, 3, 1})}, [](const auto& x) { return add(x[0], x[1]); }));
  cases.push_back(make_case<T>("sub", {rt({3, 4}), rt({2, 3, 4})}, [](const auto& x) { return sub(x[0], x[1]); }));
  cases.push_back(make_case<T>("mul", {rt({2, 3, 4}), rt({2, 3, 4})}, [](const auto& x) { return mul(x[0], x[1]); }));
  cases.push_back(make_case<T>("mul_broadcast", {rt({2, 3, 4}), rt({2, 1, 1})}, [](const auto& x) { return mul(x[0], x[1]); }));
  cases.push_back(make_case<T>("scale", {rt({3, 5})}, [](const auto& x) {
    return scale(x[0], static_cast<Elem<decltype(x)>>(-1.7));
  }));
  cases.push_back(make_case<T>("square", {rt({3, 5})}, [](const auto& x) { return square(x[0]); }));
  cases.push_back(make_case<T>("sum", {rt({2, 3, 4})}, [](const auto& x) { return sum(x[0]); }));
  cases.push_back(make_case<T>("mean", {rt({2, 3, 4})}, [](const auto& x) { return mean(x[0]); }));
  cases.push_back(make_case<T>("sum_dim", {rt({2, 3, 4})}, [](const auto& x) { return sum(x[0], 1); }));
  cases.push_back(make_case<T>("mean_dim", {rt({2, 3, 4})}, [](const auto& x) { return mean(x[0], -1); }));
  cases.push_back(make_case<T>("matmul", {rt({3, 4}), rt({4, 2})}, [](const auto& x) { return matmul(x[0], x[1]); }));
  cases.push_back(make_case<T>("matmul_batched", {rt({2, 3, 4}), rt({2, 4, 5})}, [](const auto& x) { return matmul(x[0], x[1]); }));
  cases.push_back(make_case<T>("matmul_shared_rhs", {rt({2, 3, 4}), rt({4, 5})}, [](const auto& x) { return matmul(x[0], x[1]); }));
  cases.push_back(make_case<T>("reshape", {rt({2, 3, 4})}, [](const auto& x) { return reshape(x[0], {4, 6}); }));
  cases.push_back(make_case<T>("permute", {rt({2, 3, 4})}, [](const auto& x) { return permute(x[0], {2, 0, 1}); }));
  cases.push_back(make_case<T>("transpose", {rt({2, 3, 4})}, [](const auto& x) { return transpose(x[0], 0, 2); }));
  cases.push_back(make_case<T>("concat", {rt({2, 3, 4}), rt({2, 2, 4})}, [](const auto& x) {
    return concat<Elem<decltype(x)>>({x[0], x[1]}, 1);
  }));
  cases.push_back(make_case<T>("gather_rows", {rt({2, 5, 3})},
                               [](const auto& x) { return gather_rows(x[0], {{0, 2, 4}, {3, 1, 0}}); }));
  cases.push_back(make_case<T>("scatter_rows", {rt({2, 2, 3}), rt({3})},
                               [](const auto& x) { return scatter_rows(x[0], x[1], {{1, 3}, {0, 2}}, 4); }));
  cases.push_back(make_case<T>("softmax", {rt({2, 3, 5})}, [](const auto& x) { return softmax(x[0], -1); }));
  cases.push_back(make_case<T>("softmax_dim0", {rt({4, 3})}, [](const auto& x) { return softmax(x[0], 0); }));
  cases.push_back(make_case<T>("log_softmax", {rt({2, 3, 5})}, [](const auto& x) { return log_softmax(x[0], -1); }));
  cases.push_back(make_case<T>("layer_norm", {rt({2, 3, 5}), rt({5}, 0.3, 1.0), rt({5}, 0.3)}, [](const auto& x) {
    return layer_norm(x[0], x[1], x[2], static_cast<Elem<decltype(x)>>(1e-6));
  }));
  cases.push_back(make_case<T>("gelu", {rt({3, 7}, 1.5)}, [](const auto& x) { return gelu(x[0]); }));

  std::vector<GradcheckEntry> out;
  for (const auto& c : cases) {
    const double err = check_function<T>(c, rng);
    out.push_back({c.name, err, tol, err < tol});
  }
  return out;
}

std::string group_of(const std::string& name) {
  const auto d1 = name.find('.');
  if (d1 == std::string::npos) return name;
  const auto d2 = name.find('.', d1 + 1);
  const auto second = name.substr(d1 + 1, d2 == std::string::npos ? std::string::npos : d2 - d1 - 1);
  if (!second.empty() && std::all_of(second.begin(), second.end(), [](char c) { return c >= '0' && c <= '9'; })) {
    return name.substr(0, d2);
  }
  return name.substr(0, d1);
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

template <class U>
struct TinySetup {
  ModelParams<U> params;
  ViewBatch<U> sv, tv;
};

template <class U>
TinySetup<U> tiny_setup(const ModelConfig& mc, const ModelParams<double>& values, const synth::MultiViewSample& sample,
                        std::uint64_t seed) {
  TinySetup<U> s;
  for (const auto& [name, t] : values.tensors()) s.params.set(name, Tensor<U>(t.shape(), {t.data().begin(), t.data().end()}, true));
  const auto N = mc.patch.num_tokens();
  s.sv = make_view_batch<U>({&sample.clips[0]}, mc.patch, {random_mask(N, 0.5, {seed, 0, 0, 0})}, true, 60);
  s.tv = make_view_batch<U>({&sample.clips[1]}, mc.patch, {random_mask(N, 0.5, {seed, 0, 0, 1})}, true, 60);
  return s;
}

template <class T>
std::vector<GradcheckEntry> check_model(std::uint64_t seed, double tol) {
  ModelConfig mc;
  mc.d_enc = 16, mc.enc_depth = 2, mc.enc_heads = 2, mc.enc_mlp = 32;
  mc.d_dec = 8, mc.dec_depth = 1, mc.dec_heads = 2, mc.dec_mlp = 16;
  mc.patch = PatchConfig{2, 4, 8, 8, 16, 16, 3};  // N = 32
  auto values = init_params<double>(mc, seed, ParamSet::pretrain);
  // Larger weights than the training init so every nonlinearity is exercised.
  KeyedRng rng{seed, 0x3c};
  for (auto& [name, t] : values.tensors()) {
    const bool gain = ends_with(name, ".gain"), bias = ends_with(name, ".bias");
    for (auto& v : t.mutable_data()) {
      // Round through T so both precisions evaluate the same point.
      v = static_cast<T>(gain ? 1 + 0.1 * rng.normal() : bias ? 0.1 * rng.normal() : 0.3 * rng.normal());
    }
  }
  synth::GenerateOptions g;
  g.seed = seed;
  g.n_samples = 1;
  g.n_views = 2;
  g.frames = mc.patch.frames;
  g.height = mc.patch.height;
  g.width = mc.patch.width;
  const auto sample = synth::generate_sample(g, 0, static_cast<std::uint32_t>(synth::MotionKind::circle_xy));

  auto test = tiny_setup<T>(mc, values, sample, seed);
  Model<T> model(mc, &test.params);
  backward(pretrain_loss(model, test.sv, test.tv, {}, ObjectiveConfig{}).total);

  auto ref = tiny_setup<double>(mc, values, sample, seed);
  Model<double> ref_model(mc, &ref.params);
  std::map<std::string, double> worst;
  for (auto& [name, t] : ref.params.tensors()) {
    const auto g_an = test.params.at(name).grad();
    const std::vector<double> analytic(g_an.begin(), g_an.end());
    const std::vector<double> original(t.data().begin(), t.data().end());
    const auto objective = [&](std::span<const double> theta) {
      NoGradGuard no_grad;
      std::copy(theta.begin(), theta.end(), t.mutable_data().begin());
      return pretrain_loss(ref_model, ref.sv, ref.tv, {}, ObjectiveConfig{}).total.item();
    };
    const auto numeric = finite_diff_grad(objective, original, kModelStep);
    std::copy(original.begin(), original.end(), t.mutable_data().begin());
    auto& w = worst[group_of(name)];
    w = std::max(w, gradient_error(analytic, numeric, kModelFloor));
  }
  std::vector<GradcheckEntry> out;
  for (const auto& [group, err] : worst) out.push_back({group, err, tol, err < tol});
  return out;
}

}  // namespace

double gradient_error(const std::vector<double>& analytic, const std::vector<double>& numeric, double floor) {
  if (analytic.size() != numeric.size()) throw DimensionError("gradient_error: length mismatch");
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nb += numeric[i] * numeric[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

template <class T>
GradcheckReport run_gradcheck(const GradcheckOptions& opts) {
  GradcheckReport rep;
  const double ptol = opts.primitive_tol > 0 ? opts.primitive_tol : Tolerance<T>::primitive;
  const double mtol = opts.model_tol > 0 ? opts.model_tol : Tolerance<T>::model;
  if (opts.run_primitives) rep.primitives = check_primitives<T>(opts.seed, ptol);
  if (opts.run_model) rep.model_groups = check_model<T>(opts.seed, mtol);
  const auto ok = [](const GradcheckEntry& e) { return e.pass; };
  rep.pass = std::all_of(rep.primitives.begin(), rep.primitives.end(), ok) &&
             std::all_of(rep.model_groups.begin(), rep.model_groups.end(), ok);
  return rep;
}

template GradcheckReport run_gradcheck<float>(const GradcheckOptions&);
template GradcheckReport run_gradcheck<double>(const GradcheckOptions&);

}  // namespace mv2mae
