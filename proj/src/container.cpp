#include "rine/container.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

namespace rine {

static_assert(std::endian::native == std::endian::little, "container I/O assumes little-endian");

namespace {

constexpr std::size_t kAlign = 64;

std::size_t align_up(std::size_t n) { return (n + kAlign - 1) / kAlign * kAlign; }

}  // namespace

const Tensor& Container::require(const std::string& name, const Shape& shape) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw LoadError("missing tensor \"" + name + "\"");
  if (it->second.shape() != shape) {
    throw LoadError("tensor \"" + name + "\" has shape " + shape_to_string(it->second.shape()) +
                    ", expected " + shape_to_string(shape));
  }
  return it->second;
}

void write_container(const std::filesystem::path& path, const Container& container) {
  nlohmann::json manifest = container.meta;
  manifest["format_version"] = kContainerVersion;
  nlohmann::json directory = nlohmann::json::object();
  std::size_t offset = 0;
  for (const auto& [name, tensor] : container.tensors) {
    directory[name] = {{"dtype", "float32"}, {"shape", tensor.shape()}, {"offset", offset}};
    offset = align_up(offset + tensor.size() * sizeof(float));
  }
  manifest["tensors"] = directory;
  const std::string text = manifest.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(kContainerMagic, 8);
  const std::uint64_t length = text.size();
  out.write(reinterpret_cast<const char*>(&length), sizeof length);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  const std::size_t header = 16 + text.size();
  std::vector<char> zeros(kAlign, 0);
  out.write(zeros.data(), static_cast<std::streamsize>(align_up(header) - header));
  for (const auto& [name, tensor] : container.tensors) {
    const std::size_t bytes = tensor.size() * sizeof(float);
    out.write(reinterpret_cast<const char*>(tensor.data()), static_cast<std::streamsize>(bytes));
    out.write(zeros.data(), static_cast<std::streamsize>(align_up(bytes) - bytes));
  }
  if (!out) throw Error("failed writing " + path.string());
}

Container read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kContainerMagic, 8) != 0) {
    throw LoadError(path.string() + ": bad magic, not a RINEWTS1 container");
  }
  std::uint64_t length = 0;
  std::memcpy(&length, bytes.data() + 8, sizeof length);
  if (length > bytes.size() - 16) throw LoadError(path.string() + ": truncated manifest");

  Container result;
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(length));
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(path.string() + ": manifest is not valid JSON: " + e.what());
  }
  if (manifest.value("format_version", -1) != kContainerVersion) {
    throw LoadError(path.string() + ": unsupported format_version " +
                    manifest.value("format_version", nlohmann::json(nullptr)).dump());
  }
  if (!manifest.contains("tensors") || !manifest["tensors"].is_object()) {
    throw LoadError(path.string() + ": manifest has no tensor directory");
  }
  const std::size_t payload = align_up(16 + length);
  for (const auto& [name, entry] : manifest["tensors"].items()) {
    try {
      if (entry.at("dtype").get<std::string>() != "float32") {
        throw LoadError("tensor \"" + name + "\": unsupported dtype " + entry.at("dtype").dump());
      }
      const auto shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::size_t>();
      const std::size_t count = shape_numel(shape);
      if (count == 0) throw LoadError("tensor \"" + name + "\": empty shape");
      if (payload + offset + count * sizeof(float) > bytes.size()) {
        throw LoadError("tensor \"" + name + "\": payload out of bounds");
      }
      std::vector<float> data(count);
      std::memcpy(data.data(), bytes.data() + payload + offset, count * sizeof(float));
      result.tensors.emplace(name, Tensor(shape, std::move(data)));
    } catch (const nlohmann::json::exception& e) {
      throw LoadError("tensor \"" + name + "\": malformed directory entry: " + e.what());
    }
  }
  manifest.erase("tensors");
  manifest.erase("format_version");
  result.meta = std::move(manifest);
  return result;
}

}  // namespace rine
