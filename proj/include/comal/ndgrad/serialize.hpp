#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "comal/ndgrad/tensor.hpp"

namespace comal::nd {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// NDG1 record: "NDG1", u32 rank, rank x u32 extents, then the values as
/// little-endian IEEE-754 binary64.
void write_ndg1(std::ostream& out, const Tensor& t);
Tensor read_ndg1(std::istream& in);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// Several named NDG1 records in one file behind a text index:
///
///   NDGCKPT 1
///   meta <key> <value>            (zero or more)
///   tensor <name> <offset> <len>  (offsets relative to payload start)
///   end
///   <payload>
struct Archive {
  std::map<std::string, std::string> meta;
  NamedTensors tensors;

  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const;
};

void save_archive(const std::filesystem::path& path, const Archive& archive);
Archive load_archive(const std::filesystem::path& path);

}  // namespace comal::nd
