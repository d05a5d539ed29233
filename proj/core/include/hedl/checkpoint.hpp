#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "hedl/tensor.hpp"

namespace hedl {

/// Binary tensor container: magic "HEDL", version, name→(dtype, shape, offset)
/// table, little-endian payloads. float64 payloads round-trip bit-exactly;
/// an integer dtype carries index records (head masks, vocab layouts).
class Checkpoint {
 public:
  void put(const std::string& name, const Tensor& t);
  void put_ints(const std::string& name, const std::vector<int64_t>& values);

  bool contains(const std::string& name) const;
  /// Missing name → ContractError. Returned tensor is a detached leaf.
  Tensor get(const std::string& name) const;
  std::vector<int64_t> get_ints(const std::string& name) const;
  std::vector<std::string> names() const;  // sorted

  void save(const std::filesystem::path& file) const;
  static Checkpoint load(const std::filesystem::path& file);

 private:
  struct Entry {
    uint8_t dtype;  // 1 = f64, 2 = i64
    Shape shape;
    std::vector<double> f64;
    std::vector<int64_t> i64;
  };
  std::map<std::string, Entry> entries_;  // ordered: file bytes are canonical
};

}  // namespace hedl
