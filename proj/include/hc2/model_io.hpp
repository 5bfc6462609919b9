#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "hc2/error.hpp"
#include "hc2/model.hpp"

namespace hc2 {

// Model file layout, all integers u64 and all values f64, little-endian:
//   "HC2MODEL" | u32 version | epochs | K | F | vocab[F] | embed_dim
//   | #shared | shared_widths | #tower | tower_widths
//   | #tensors | per tensor: rows, cols, rows*cols values (declaration order)

inline constexpr char kModelMagic[8] = {'H', 'C', '2', 'M', 'O', 'D', 'E', 'L'};
inline constexpr std::uint32_t kModelVersion = 1;

namespace detail {

template <typename T>
void put_le(std::string& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

class LeReader {
 public:
  explicit LeReader(std::string data) : data_(std::move(data)) {}

  template <typename T>
  T get() {
    if (pos_ + sizeof(T) > data_.size()) throw DataError("model file truncated");
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, data_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, bytes, sizeof(T));
    return v;
  }
  std::string take(std::size_t n) {
    if (pos_ + n > data_.size()) throw DataError("model file truncated");
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  std::string data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_model(const ModelParams& p, std::uint64_t epochs_trained) {
  std::string out(kModelMagic, sizeof kModelMagic);
  detail::put_le<std::uint32_t>(out, kModelVersion);
  detail::put_le<std::uint64_t>(out, epochs_trained);
  detail::put_le<std::uint64_t>(out, p.schema.scenarios);
  detail::put_le<std::uint64_t>(out, p.schema.fields());
  for (std::size_t v : p.schema.vocab) detail::put_le<std::uint64_t>(out, v);
  detail::put_le<std::uint64_t>(out, p.arch.embed_dim);
  detail::put_le<std::uint64_t>(out, p.arch.shared_widths.size());
  for (std::size_t w : p.arch.shared_widths) detail::put_le<std::uint64_t>(out, w);
  detail::put_le<std::uint64_t>(out, p.arch.tower_widths.size());
  for (std::size_t w : p.arch.tower_widths) detail::put_le<std::uint64_t>(out, w);
  const auto tensors = p.tensors();
  detail::put_le<std::uint64_t>(out, tensors.size());
  for (const Matrix* t : tensors) {
    detail::put_le<std::uint64_t>(out, t->rows());
    detail::put_le<std::uint64_t>(out, t->cols());
    for (double v : t->data()) detail::put_le<double>(out, v);
  }
  return out;
}

struct LoadedModel {
  ModelParams params;
  std::uint64_t epochs_trained = 0;
};

inline LoadedModel deserialize_model(std::string bytes) {
  detail::LeReader in(std::move(bytes));
  if (in.take(sizeof kModelMagic) != std::string(kModelMagic, sizeof kModelMagic)) {
    throw DataError("not a model file (bad magic)");
  }
  const auto version = in.get<std::uint32_t>();
  if (version != kModelVersion) throw DataError("unsupported model file version " + std::to_string(version));
  LoadedModel m;
  m.epochs_trained = in.get<std::uint64_t>();
  Schema schema;
  schema.scenarios = in.get<std::uint64_t>();
  const auto fields = in.get<std::uint64_t>();
  if (fields > (1u << 20)) throw DataError("implausible field count in model file");
  for (std::uint64_t f = 0; f < fields; ++f) schema.vocab.push_back(in.get<std::uint64_t>());
  Architecture arch;
  arch.embed_dim = in.get<std::uint64_t>();
  auto widths = [&in] {
    const auto n = in.get<std::uint64_t>();
    if (n > 1024) throw DataError("implausible layer count in model file");
    std::vector<std::size_t> w;
    for (std::uint64_t i = 0; i < n; ++i) w.push_back(in.get<std::uint64_t>());
    return w;
  };
  arch.shared_widths = widths();
  arch.tower_widths = widths();
  m.params = ModelParams::zeros(schema, arch);
  const auto tensors = m.params.tensors();
  if (in.get<std::uint64_t>() != tensors.size()) throw DataError("model file tensor count does not match its schema");
  for (Matrix* t : tensors) {
    const auto rows = in.get<std::uint64_t>();
    const auto cols = in.get<std::uint64_t>();
    if (rows != t->rows() || cols != t->cols()) {
      throw DataError("model file tensor shape " + std::to_string(rows) + "x" + std::to_string(cols) +
                      " does not match expected " + t->shape_str());
    }
    for (double& v : t->data()) v = in.get<double>();
  }
  if (!in.done()) throw DataError("trailing bytes after model parameters");
  return m;
}

inline void save_model(const std::filesystem::path& path, const ModelParams& p, std::uint64_t epochs_trained) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  const std::string bytes = serialize_model(p, epochs_trained);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

inline LoadedModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_model(std::move(bytes));
}

}  // namespace hc2
