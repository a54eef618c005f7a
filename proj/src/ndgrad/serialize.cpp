#include "comal/ndgrad/serialize.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace comal::nd {

namespace {

static_assert(std::endian::native == std::endian::little,
              "NDG1 writer assumes a little-endian host");

void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 4);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw FormatError("NDG1: truncated header");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_ndg1(std::ostream& out, const Tensor& t) {
  out.write("NDG1", 4);
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) put_u32(out, static_cast<std::uint32_t>(e));
  const auto data = t.data();
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(double)));
  if (!out) throw FormatError("NDG1: write failed");
}

Tensor read_ndg1(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "NDG1", 4) != 0) {
    throw FormatError("NDG1: bad magic");
  }
  const std::uint32_t rank = get_u32(in);
  if (rank > 16) throw FormatError("NDG1: implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) e = get_u32(in);
  std::vector<double> values(numel_of(shape));
  if (!in.read(reinterpret_cast<char*>(values.data()),
               static_cast<std::streamsize>(values.size() * sizeof(double)))) {
    throw FormatError("NDG1: truncated payload");
  }
  return Tensor::from(std::move(shape), std::move(values));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  write_ndg1(out, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return read_ndg1(in);
}

const Tensor& Archive::get(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw FormatError("archive has no tensor named '" + name + "'");
}

bool Archive::contains(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return true;
  }
  return false;
}

void save_archive(const std::filesystem::path& path, const Archive& archive) {
  std::vector<std::string> blobs;
  for (const auto& [name, t] : archive.tensors) {
    std::ostringstream os(std::ios::binary);
    write_ndg1(os, t);
    blobs.push_back(os.str());
  }
  std::ostringstream header;
  header << "NDGCKPT 1\n";
  for (const auto& [k, v] : archive.meta) {
    if (k.find_first_of(" \n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw FormatError("archive meta key/value contains a separator: " + k);
    }
    header << "meta " << k << ' ' << v << '\n';
  }
  std::size_t offset = 0;
  for (std::size_t i = 0; i < blobs.size(); ++i) {
    const auto& name = archive.tensors[i].first;
    if (name.find_first_of(" \n") != std::string::npos) {
      throw FormatError("tensor name contains whitespace: " + name);
    }
    header << "tensor " << name << ' ' << offset << ' ' << blobs[i].size() << '\n';
    offset += blobs[i].size();
  }
  header << "end\n";
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out << header.str();
  for (const auto& b : blobs) out.write(b.data(), static_cast<std::streamsize>(b.size()));
  if (!out) throw FormatError("write failed: " + path.string());
}

Archive load_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "NDGCKPT 1") {
    throw FormatError(path.string() + ": not an NDGCKPT archive");
  }
  Archive archive;
  struct Entry {
    std::string name;
    std::size_t offset, length;
  };
  std::vector<Entry> entries;
  while (std::getline(in, line)) {
    if (line == "end") break;
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "meta") {
      std::string key;
      ls >> key;
      std::string value;
      std::getline(ls, value);
      if (!value.empty() && value[0] == ' ') value.erase(0, 1);
      archive.meta[key] = value;
    } else if (kind == "tensor") {
      Entry e;
      if (!(ls >> e.name >> e.offset >> e.length)) {
        throw FormatError(path.string() + ": malformed index line '" + line + "'");
      }
      entries.push_back(e);
    } else {
      throw FormatError(path.string() + ": unknown index entry '" + line + "'");
    }
  }
  if (line != "end") throw FormatError(path.string() + ": index not terminated");
  const auto payload = in.tellg();
  for (const auto& e : entries) {
    in.seekg(payload + static_cast<std::streamoff>(e.offset));
    archive.tensors.emplace_back(e.name, read_ndg1(in));
  }
  return archive;
}

}  // namespace comal::nd
