// Copyright 2026 The clever-prune Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Binary container, little-endian throughout:
//
//   "EGEM"  u32 version (=1)  u32 record_count
//   record*: u8 tag, tag-specific u32 header, raw f64 payloads
//
// Model files hold one record per layer followed by a model trailer:
//   u32 class_count, u32 input_rank, u32 extents..., u32 site_count, u32 sites...
// Tensor files (datasets) hold one kTensorRecord per tensor and no trailer.
//
// Layer headers:
//   Dense     u32 out, u32 in                  W[out*in], b[out]
//   Conv2D    u32 F, C, kh, kw, stride, pad    K[F*C*kh*kw], b[F]
//   ReLU      -
//   MaxPool   u32 kernel, stride
//   Flatten   -
//   Scale     u32 n                            c[n]
//   PcaScale  u32 n, K                         U[n*K], mean[n], eigenvalues[K], c[K]
//   Tensor    u32 rank, extents...             data[prod(extents)]

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "clever_prune/errors.hpp"
#include "clever_prune/model.hpp"

namespace clever_prune {

inline constexpr char kMagic[4] = {'E', 'G', 'E', 'M'};
inline constexpr std::uint32_t kFormatVersion = 1;

enum class RecordTag : std::uint8_t {
  kDense = 1,
  kConv2D = 2,
  kReLU = 3,
  kMaxPool = 4,
  kFlatten = 5,
  kScale = 6,
  kPcaScale = 7,
  kTensor = 32,
};

static_assert(std::endian::native == std::endian::little,
              "container I/O assumes a little-endian host");

namespace detail {

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void u32_size(std::size_t v) {
    if (v > UINT32_MAX) throw DomainError("extent does not fit in u32");
    u32(static_cast<std::uint32_t>(v));
  }
  void f64s(const Tensor& t) { bytes(t.data(), t.size() * sizeof(double)); }

  const std::vector<std::uint8_t>& buffer() const noexcept { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<std::uint8_t> buf) : buf_(std::move(buf)) {}

  std::size_t offset() const noexcept { return pos_; }
  bool at_end() const noexcept { return pos_ == buf_.size(); }

  void need(std::size_t n, const char* what) const {
    if (buf_.size() - pos_ < n) {
      throw FormatError(std::string("truncated payload reading ") + what, pos_);
    }
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return buf_[pos_++];
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v;
    std::memcpy(&v, buf_.data() + pos_, 4);
    pos_ += 4;
    return v;
  }
  Tensor tensor(Shape shape, const char* what) {
    for (std::size_t e : shape) {
      if (e == 0) throw FormatError(std::string("zero extent in ") + what, pos_);
    }
    const std::size_t count = shape_volume(shape);
    need(count * sizeof(double), what);
    std::vector<double> data(count);
    std::memcpy(data.data(), buf_.data() + pos_, count * sizeof(double));
    pos_ += count * sizeof(double);
    return Tensor(std::move(shape), std::move(data));
  }

 private:
  std::vector<std::uint8_t> buf_;
  std::size_t pos_ = 0;
};

inline void write_header(ByteWriter& w, std::size_t records) {
  w.bytes(kMagic, 4);
  w.u32(kFormatVersion);
  w.u32_size(records);
}

inline std::uint32_t read_header(ByteReader& r) {
  r.need(4, "magic");
  char magic[4];
  for (char& c : magic) c = static_cast<char>(r.u8("magic"));
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("bad magic, expected EGEM", 0);
  const std::size_t at = r.offset();
  const std::uint32_t version = r.u32("version");
  if (version != kFormatVersion) {
    throw FormatError("unsupported version " + std::to_string(version), at);
  }
  return r.u32("record count");
}

inline void write_layer(ByteWriter& w, const Layer& layer) {
  std::visit(
      [&](const auto& l) {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, Dense>) {
          w.u8(static_cast<std::uint8_t>(RecordTag::kDense));
          w.u32_size(l.out_features());
          w.u32_size(l.in_features());
          w.f64s(l.weight);
          w.f64s(l.bias);
        } else if constexpr (std::is_same_v<T, Conv2D>) {
          w.u8(static_cast<std::uint8_t>(RecordTag::kConv2D));
          for (std::size_t e : l.kernels.shape()) w.u32_size(e);
          w.u32_size(l.stride);
          w.u32_size(l.pad);
          w.f64s(l.kernels);
          w.f64s(l.bias);
        } else if constexpr (std::is_same_v<T, ReLU>) {
          w.u8(static_cast<std::uint8_t>(RecordTag::kReLU));
        } else if constexpr (std::is_same_v<T, MaxPool>) {
          w.u8(static_cast<std::uint8_t>(RecordTag::kMaxPool));
          w.u32_size(l.kernel);
          w.u32_size(l.stride);
        } else if constexpr (std::is_same_v<T, Flatten>) {
          w.u8(static_cast<std::uint8_t>(RecordTag::kFlatten));
        } else if constexpr (std::is_same_v<T, Scale>) {
          w.u8(static_cast<std::uint8_t>(RecordTag::kScale));
          w.u32_size(l.coefficients.size());
          w.f64s(l.coefficients);
        } else {
          w.u8(static_cast<std::uint8_t>(RecordTag::kPcaScale));
          w.u32_size(l.basis().dim());
          w.u32_size(l.basis().rank());
          w.f64s(l.basis().components);
          w.f64s(l.basis().mean);
          w.f64s(l.basis().eigenvalues);
          w.f64s(l.coefficients());
        }
      },
      layer);
}

inline Layer read_layer(ByteReader& r) {
  const std::size_t at = r.offset();
  const auto tag = static_cast<RecordTag>(r.u8("layer tag"));
  switch (tag) {
    case RecordTag::kDense: {
      const std::size_t out = r.u32("Dense header"), in = r.u32("Dense header");
      Tensor wt = r.tensor({out, in}, "Dense weight");
      Tensor b = r.tensor({out}, "Dense bias");
      return Dense{std::move(wt), std::move(b)};
    }
    case RecordTag::kConv2D: {
      Shape ks(4);
      for (auto& e : ks) e = r.u32("Conv2D header");
      const std::size_t stride = r.u32("Conv2D header"), pad = r.u32("Conv2D header");
      const std::size_t filters = ks[0];
      Tensor k = r.tensor(std::move(ks), "Conv2D kernels");
      Tensor b = r.tensor({filters}, "Conv2D bias");
      return Conv2D{std::move(k), std::move(b), stride, pad};
    }
    case RecordTag::kReLU:
      return ReLU{};
    case RecordTag::kMaxPool: {
      const std::size_t k = r.u32("MaxPool header"), s = r.u32("MaxPool header");
      return MaxPool{k, s};
    }
    case RecordTag::kFlatten:
      return Flatten{};
    case RecordTag::kScale: {
      const std::size_t n = r.u32("Scale header");
      return Scale{r.tensor({n}, "Scale coefficients")};
    }
    case RecordTag::kPcaScale: {
      const std::size_t n = r.u32("PcaScale header"), k = r.u32("PcaScale header");
      PcaBasis basis;
      basis.components = r.tensor({n, k}, "PcaScale components");
      basis.mean = r.tensor({n}, "PcaScale mean");
      basis.eigenvalues = r.tensor({k}, "PcaScale eigenvalues");
      Tensor c = r.tensor({k}, "PcaScale coefficients");
      try {
        return PcaScale(std::move(basis), std::move(c));
      } catch (const Error& e) {
        throw FormatError(std::string("invalid PcaScale record: ") + e.what(), at);
      }
    }
    default:
      throw FormatError("unknown layer tag " + std::to_string(static_cast<int>(tag)), at);
  }
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::filesystem::path& path,
                       const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for " + path.string());
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize(const Model& model) {
  detail::ByteWriter w;
  detail::write_header(w, model.layers.size());
  for (const Layer& layer : model.layers) detail::write_layer(w, layer);
  w.u32_size(model.class_count);
  w.u32_size(model.input_shape.size());
  for (std::size_t e : model.input_shape) w.u32_size(e);
  w.u32_size(model.refinable_sites.size());
  for (std::size_t s : model.refinable_sites) w.u32_size(s);
  return w.buffer();
}

inline Model deserialize_model(std::vector<std::uint8_t> bytes) {
  detail::ByteReader r(std::move(bytes));
  const std::uint32_t count = detail::read_header(r);
  Model m;
  m.layers.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) m.layers.push_back(detail::read_layer(r));
  m.class_count = r.u32("class count");
  const std::uint32_t rank = r.u32("input rank");
  for (std::uint32_t i = 0; i < rank; ++i) m.input_shape.push_back(r.u32("input extent"));
  const std::uint32_t sites = r.u32("site count");
  for (std::uint32_t i = 0; i < sites; ++i) m.refinable_sites.push_back(r.u32("site"));
  if (!r.at_end()) throw FormatError("trailing bytes after model", r.offset());
  const std::size_t end = r.offset();
  try {
    validate(m);
  } catch (const Error& e) {
    throw FormatError(std::string("inconsistent model: ") + e.what(), end);
  }
  return m;
}

inline void save(const Model& model, const std::filesystem::path& path) {
  detail::write_file(path, serialize(model));
}

inline Model load(const std::filesystem::path& path) {
  return deserialize_model(detail::read_file(path));
}

inline std::vector<std::uint8_t> serialize_tensors(const std::vector<Tensor>& tensors) {
  detail::ByteWriter w;
  detail::write_header(w, tensors.size());
  for (const Tensor& t : tensors) {
    w.u8(static_cast<std::uint8_t>(RecordTag::kTensor));
    w.u32_size(t.rank());
    for (std::size_t e : t.shape()) w.u32_size(e);
    w.f64s(t);
  }
  return w.buffer();
}

inline std::vector<Tensor> deserialize_tensors(std::vector<std::uint8_t> bytes) {
  detail::ByteReader r(std::move(bytes));
  const std::uint32_t count = detail::read_header(r);
  std::vector<Tensor> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t at = r.offset();
    if (r.u8("record tag") != static_cast<std::uint8_t>(RecordTag::kTensor)) {
      throw FormatError("expected a tensor record", at);
    }
    const std::uint32_t rank = r.u32("tensor rank");
    Shape shape(rank);
    for (auto& e : shape) e = r.u32("tensor extent");
    out.push_back(r.tensor(std::move(shape), "tensor payload"));
  }
  if (!r.at_end()) throw FormatError("trailing bytes after tensors", r.offset());
  return out;
}

inline void save_tensors(const std::vector<Tensor>& tensors,
                         const std::filesystem::path& path) {
  detail::write_file(path, serialize_tensors(tensors));
}

inline std::vector<Tensor> load_tensors(const std::filesystem::path& path) {
  return deserialize_tensors(detail::read_file(path));
}

}  // namespace clever_prune
