#include "fedpull/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>

namespace fedpull {

std::string_view to_string(Group g) {
  switch (g) {
    case Group::encoder:
      return "encoder";
    case Group::decoder:
      return "decoder";
    case Group::shared:
      return "shared";
  }
  return "shared";
}

Group group_from_string(std::string_view s) {
  if (s == "encoder") return Group::encoder;
  if (s == "decoder") return Group::decoder;
  if (s == "shared") return Group::shared;
  throw Error("unknown tensor group '" + std::string(s) + "'");
}

Group group_of(std::string_view tensor_name) {
  if (tensor_name.starts_with("enc.")) return Group::encoder;
  if (tensor_name.starts_with("dec.")) return Group::decoder;
  return Group::shared;
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

NamedTensor::NamedTensor(std::string name, Shape shape,
                         std::vector<float> values)
    : name_(std::move(name)), shape_(std::move(shape)),
      values_(std::move(values)) {
  for (auto e : shape_) {
    if (e == 0)
      throw Error("tensor '" + name_ + "' has a zero extent in shape " +
                  shape_string(shape_));
  }
  if (shape_numel(shape_) != values_.size())
    throw Error("tensor '" + name_ + "': shape " + shape_string(shape_) +
                " implies " + std::to_string(shape_numel(shape_)) +
                " values, got " + std::to_string(values_.size()));
}

NamedTensor NamedTensor::zeros(std::string name, Shape shape) {
  std::vector<float> v(shape_numel(shape), 0.0f);
  return NamedTensor(std::move(name), std::move(shape), std::move(v));
}

double l1_norm(const NamedTensor& t) {
  double sum = 0.0;
  auto v = t.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i]))
      throw Error("tensor '" + t.name() + "' has a non-finite value at index " +
                  std::to_string(i));
    sum += std::fabs(static_cast<double>(v[i]));
  }
  return sum;
}

namespace {

void require_same(const NamedTensor& a, const NamedTensor& b,
                  std::string_view op) {
  if (a.name() != b.name() || a.shape() != b.shape())
    throw Error(std::string(op) + ": mismatch between '" + a.name() + "' " +
                shape_string(a.shape()) + " and '" + b.name() + "' " +
                shape_string(b.shape()));
}

}  // namespace

NamedTensor diff(const NamedTensor& a, const NamedTensor& b) {
  require_same(a, b, "diff");
  auto av = a.values();
  auto bv = b.values();
  std::vector<float> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
  return NamedTensor(a.name(), a.shape(), std::move(out));
}

NamedTensor weighted_accumulate(const NamedTensor& acc, double weight,
                                const NamedTensor& t) {
  if (acc.shape() != t.shape())
    throw Error("weighted_accumulate: shape mismatch between '" + acc.name() +
                "' " + shape_string(acc.shape()) + " and '" + t.name() + "' " +
                shape_string(t.shape()));
  if (!std::isfinite(weight))
    throw Error("weighted_accumulate: non-finite weight for '" + t.name() + "'");
  auto av = acc.values();
  auto tv = t.values();
  std::vector<float> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i)
    out[i] = static_cast<float>(static_cast<double>(av[i]) +
                                weight * static_cast<double>(tv[i]));
  return NamedTensor(acc.name(), acc.shape(), std::move(out));
}

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4))
    throw Error("truncated tensor record");
  return static_cast<std::uint32_t>(b[0]) |
         (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_tensor(std::ostream& out, const NamedTensor& t) {
  put_u32(out, static_cast<std::uint32_t>(t.name().size()));
  out.write(t.name().data(), static_cast<std::streamsize>(t.name().size()));
  put_u32(out, static_cast<std::uint32_t>(t.shape().size()));
  for (auto e : t.shape()) put_u32(out, e);
  for (float f : t.values()) put_u32(out, std::bit_cast<std::uint32_t>(f));
  if (!out) throw Error("failed writing tensor '" + t.name() + "'");
}

NamedTensor read_tensor(std::istream& in) {
  auto name_len = get_u32(in);
  std::string name(name_len, '\0');
  if (!in.read(name.data(), name_len))
    throw Error("truncated tensor name");
  auto rank = get_u32(in);
  Shape shape(rank);
  for (auto& e : shape) e = get_u32(in);
  std::vector<float> values(shape_numel(shape));
  for (auto& f : values) f = std::bit_cast<float>(get_u32(in));
  return NamedTensor(std::move(name), std::move(shape), std::move(values));
}

std::size_t serialized_size(std::string_view name, std::size_t rank,
                            std::size_t numel) {
  return 4 + name.size() + 4 + 4 * rank + 4 * numel;
}

std::size_t serialized_size(const NamedTensor& t) {
  return serialized_size(t.name(), t.shape().size(), t.numel());
}

}  // namespace fedpull
