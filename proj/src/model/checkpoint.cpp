#include "mv2mae/checkpoint.hpp"

#include <algorithm>
#include <limits>

#include "common/binary_io.hpp"

namespace mv2mae {

namespace {
constexpr char kMagic[4] = {'M', 'V', '2', 'C'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

template <class T>
std::vector<unsigned char> checkpoint_bytes(const TensorMap<T>& tensors) {
  io::Writer w;
  w.bytes(kMagic, 4);
  w.put<std::uint32_t>(kVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.size() > std::numeric_limits<std::uint16_t>::max()) throw std::invalid_argument("tensor name too long");
    w.put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(dtype_of<T>()));
    w.put_span<T>(t.data());
  }
  return w.buffer();
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, const TensorMap<T>& tensors) {
  io::Writer w;
  const auto bytes = checkpoint_bytes(tensors);
  w.bytes(bytes.data(), bytes.size());
  w.save(path);
}

template <class T>
TensorMap<T> parse_checkpoint(std::vector<unsigned char> bytes, const std::string& name) {
  io::Reader r(std::move(bytes), name);
  char magic[4];
  r.bytes(magic, 4);
  if (!std::equal(magic, magic + 4, kMagic)) throw io::IoError("not a checkpoint (bad magic): " + name);
  if (const auto v = r.get<std::uint32_t>(); v != kVersion) {
    throw io::IoError("unsupported checkpoint version " + std::to_string(v) + ": " + name);
  }
  const auto count = r.get<std::uint32_t>();
  TensorMap<T> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string key(r.get<std::uint16_t>(), '\0');
    r.bytes(key.data(), key.size());
    Shape shape(r.get<std::uint8_t>());
    for (auto& d : shape) d = r.get<std::uint32_t>();
    const auto dtype = static_cast<DType>(r.get<std::uint8_t>());
    std::vector<T> data(shape_numel(shape));
    if (dtype == dtype_of<T>()) {
      r.get_span<T>(data);
    } else if (dtype == DType::f32) {
      std::vector<float> raw(data.size());
      r.get_span<float>(raw);
      std::copy(raw.begin(), raw.end(), data.begin());
    } else if (dtype == DType::f64) {
      std::vector<double> raw(data.size());
      r.get_span<double>(raw);
      std::transform(raw.begin(), raw.end(), data.begin(), [](double v) { return static_cast<T>(v); });
    } else {
      throw io::IoError("unknown dtype tag in checkpoint entry " + key + ": " + name);
    }
    out.emplace(std::move(key), Tensor<T>(std::move(shape), std::move(data), true));
  }
  if (!r.at_end()) throw io::IoError("trailing bytes in checkpoint: " + name);
  return out;
}

template <class T>
TensorMap<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io::IoError("cannot open checkpoint " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint<T>(std::move(bytes), path.string());
}

template std::vector<unsigned char> checkpoint_bytes(const TensorMap<float>&);
template std::vector<unsigned char> checkpoint_bytes(const TensorMap<double>&);
template void save_checkpoint(const std::filesystem::path&, const TensorMap<float>&);
template void save_checkpoint(const std::filesystem::path&, const TensorMap<double>&);
template TensorMap<float> load_checkpoint<float>(const std::filesystem::path&);
template TensorMap<double> load_checkpoint<double>(const std::filesystem::path&);
template TensorMap<float> parse_checkpoint<float>(std::vector<unsigned char>, const std::string&);
template TensorMap<double> parse_checkpoint<double>(std::vector<unsigned char>, const std::string&);

}  // namespace mv2mae
