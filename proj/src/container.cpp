#include "tars/container.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>
#include <sstream>

#include "tars/errors.hpp"

namespace tars::container {

static_assert(std::endian::native == std::endian::little,
              "container I/O assumes a little-endian host");

namespace {

template <typename T>
void append_le(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T read_le(std::string_view bytes, std::size_t offset) {
  T value;
  std::memcpy(&value, bytes.data() + offset, sizeof(T));
  return value;
}

std::size_t element_count(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

constexpr std::size_t kPreamble = 4 + sizeof(std::uint32_t) + sizeof(std::uint64_t);

}  // namespace

const Tensor& Container::get(std::string_view name) const {
  auto it = std::ranges::find(tensors, name, &Tensor::name);
  if (it == tensors.end()) throw InputError("container: missing tensor '" + std::string(name) + "'");
  return *it;
}

bool Container::contains(std::string_view name) const {
  return std::ranges::find(tensors, name, &Tensor::name) != tensors.end();
}

std::string serialize(const Container& c) {
  nlohmann::json header = nlohmann::json::object();
  if (!c.meta.empty()) header[std::string(kMetaKey)] = c.meta;
  std::size_t offset = 0;
  for (const auto& t : c.tensors) {
    if (element_count(t.shape) != t.data.size()) {
      throw DimensionError("container: tensor '" + t.name + "' shape does not match data");
    }
    header[t.name] = {{"dtype", "f32"}, {"shape", t.shape}, {"offset", offset}};
    offset += t.data.size() * sizeof(float);
  }
  const std::string header_text = header.dump();

  std::string out;
  out.reserve(kPreamble + header_text.size() + offset);
  out.append(kMagic);
  append_le<std::uint32_t>(out, kVersion);
  append_le<std::uint64_t>(out, header_text.size());
  out.append(header_text);
  for (const auto& t : c.tensors) {
    out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(float));
  }
  return out;
}

namespace {

nlohmann::json parse_header(std::string_view bytes, std::size_t& data_start) {
  if (bytes.size() < kPreamble || bytes.substr(0, 4) != kMagic) {
    throw InputError("container: bad magic (not a TARS container)");
  }
  const auto version = read_le<std::uint32_t>(bytes, 4);
  if (version != kVersion) {
    throw InputError("container: unsupported version " + std::to_string(version));
  }
  const auto header_len = read_le<std::uint64_t>(bytes, 8);
  if (header_len > bytes.size() - kPreamble) throw InputError("container: truncated header");
  data_start = kPreamble + header_len;
  try {
    return nlohmann::json::parse(bytes.substr(kPreamble, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("container: malformed header: ") + e.what());
  }
}

}  // namespace

Container parse(std::string_view bytes) {
  std::size_t data_start = 0;
  const nlohmann::json header = parse_header(bytes, data_start);
  const std::size_t data_len = bytes.size() - data_start;

  Container c;
  // Restore the writer's tensor order, which is the order of offsets.
  std::vector<std::pair<std::size_t, std::string>> order;
  for (const auto& [name, info] : header.items()) {
    if (name == kMetaKey) {
      c.meta = info;
      continue;
    }
    if (info.value("dtype", "") != "f32") {
      throw InputError("container: tensor '" + name + "' has unsupported dtype");
    }
    order.emplace_back(info.at("offset").get<std::size_t>(), name);
  }
  std::ranges::sort(order);
  for (const auto& [offset, name] : order) {
    Tensor t;
    t.name = name;
    t.shape = header[name].at("shape").get<std::vector<std::size_t>>();
    const std::size_t n = element_count(t.shape);
    if (offset > data_len || n * sizeof(float) > data_len - offset) {
      throw InputError("container: tensor '" + name + "' extends past end of file");
    }
    t.data.resize(n);
    std::memcpy(t.data.data(), bytes.data() + data_start + offset, n * sizeof(float));
    c.tensors.push_back(std::move(t));
  }
  return c;
}

nlohmann::json read_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  std::string preamble(kPreamble, '\0');
  in.read(preamble.data(), static_cast<std::streamsize>(kPreamble));
  if (in.gcount() != static_cast<std::streamsize>(kPreamble) || preamble.substr(0, 4) != kMagic) {
    throw InputError(path.string() + ": not a TARS container");
  }
  const auto header_len = read_le<std::uint64_t>(preamble, 8);
  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  if (in.gcount() != static_cast<std::streamsize>(header_len)) {
    throw InputError(path.string() + ": truncated header");
  }
  return nlohmann::json::parse(header);
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("short write to " + path.string());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

std::uint64_t fnv1a64(std::string_view bytes) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace tars::container
