#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace fedpull {

/// Base error for everything thrown by this library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Group { encoder, decoder, shared };

std::string_view to_string(Group g);
Group group_from_string(std::string_view s);

/// "enc." -> encoder, "dec." -> decoder, anything else -> shared.
Group group_of(std::string_view tensor_name);

using Shape = std::vector<std::uint32_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// A named, shaped, dense float32 array. Values are immutable after
/// construction; every operation returns a new tensor.
class NamedTensor {
 public:
  NamedTensor() = default;
  NamedTensor(std::string name, Shape shape, std::vector<float> values);

  /// Zero-filled tensor of the given shape.
  static NamedTensor zeros(std::string name, Shape shape);

  const std::string& name() const { return name_; }
  const Shape& shape() const { return shape_; }
  std::span<const float> values() const { return values_; }
  std::size_t numel() const { return values_.size(); }
  Group group() const { return group_of(name_); }

  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;

 private:
  std::string name_;
  Shape shape_;
  std::vector<float> values_;
};

/// Change of one tensor between two model states.
struct DeltaRecord {
  std::string name;
  double norm = 0.0;  // L1 norm of the elementwise difference
  std::size_t param_count = 0;
  Group group = Group::shared;

  friend bool operator==(const DeltaRecord&, const DeltaRecord&) = default;
};

/// Sum of absolute values, accumulated in double in ascending index order.
/// Throws on NaN/Inf, naming the tensor and the first offending index.
double l1_norm(const NamedTensor& t);

/// Elementwise a - b. Names and shapes must match.
NamedTensor diff(const NamedTensor& a, const NamedTensor& b);

/// acc + weight * t, computed in double and stored as float.
NamedTensor weighted_accumulate(const NamedTensor& acc, double weight,
                                const NamedTensor& t);

// Binary record: u32 name length, UTF-8 name, u32 rank, u32 extents, f32
// values. All integers and floats little-endian.
void write_tensor(std::ostream& out, const NamedTensor& t);
NamedTensor read_tensor(std::istream& in);

/// Size in bytes of the binary record for t.
std::size_t serialized_size(const NamedTensor& t);
std::size_t serialized_size(std::string_view name, std::size_t rank,
                            std::size_t numel);

}  // namespace fedpull
