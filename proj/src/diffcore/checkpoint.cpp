#include "osteo/diffcore/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "osteo/diffcore/errors.hpp"

namespace osteo::diffcore {

namespace {

constexpr char kMagic[8] = {'O', 'S', 'T', 'C', 'K', 'P', 'T', '1'};

void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFFu);
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw std::runtime_error("truncated checkpoint");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParamSet& params) {
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& [name, t] : params.items()) {
    manifest.push_back({{"name", name}, {"shape", t.shape()}});
  }
  const std::string text = manifest.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
  os.write(kMagic, 8);
  put_u64(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [_, t] : params.items()) {
    for (double v : t.values()) put_u64(os, std::bit_cast<std::uint64_t>(v));
  }
}

void load_checkpoint(const std::filesystem::path& path, ParamSet& params) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read checkpoint " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) {
    throw std::runtime_error(path.string() + " is not a checkpoint");
  }
  const auto len = get_u64(is);
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw std::runtime_error("truncated checkpoint");
  const auto manifest = nlohmann::json::parse(text);
  if (manifest.size() != params.size()) {
    throw DimensionError("checkpoint has " + std::to_string(manifest.size()) + " tensors, expected " +
                         std::to_string(params.size()));
  }
  auto& items = params.items();
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& entry = manifest[i];
    if (entry.at("name").get<std::string>() != items[i].first ||
        entry.at("shape").get<Shape>() != items[i].second.shape()) {
      throw DimensionError("checkpoint entry " + entry.dump() + " does not match parameter '" +
                           items[i].first + "' " + shape_str(items[i].second.shape()));
    }
  }
  for (auto& [_, t] : items) {
    for (auto& v : t.mutable_values()) v = std::bit_cast<double>(get_u64(is));
  }
}

}  // namespace osteo::diffcore
