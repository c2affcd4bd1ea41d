#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtbd/error.hpp"
#include "mtbd/model.hpp"

namespace mtbd {

// Layout (all integers little-endian):
//   "MTBDCKPT" | u32 version | u64 header length | header JSON
//   u32 tensor count | per tensor: u32 name length, name, u32 ndim,
//   u64 dims[ndim], f32 data[prod(dims)]
inline constexpr char kCheckpointMagic[8] = {'M', 'T', 'B', 'D', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

template <typename U>
void put(std::ostream& os, U v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename U>
U get(std::istream& is, const std::string& what) {
  U v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v))
    throw LoadError("checkpoint truncated while reading " + what);
  return v;
}

}  // namespace detail

inline nlohmann::ordered_json checkpoint_header(const ModelCheckpoint& m) {
  const auto& f = m.fingerprint;
  return {{"config", to_json(m.config)},
          {"fingerprint",
           {{"corpus_hash", f.corpus_hash},
            {"epochs", f.epochs},
            {"seed", f.seed},
            {"replay_loss", f.replay_loss},
            {"replay_batch", f.replay_batch}}}};
}

inline void save(const ModelCheckpoint& m, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw LoadError("cannot write checkpoint " + path.string());
  os.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put<std::uint32_t>(os, kCheckpointVersion);
  const std::string header = checkpoint_header(m).dump();
  detail::put<std::uint64_t>(os, header.size());
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  const auto tensors = m.params.tensors();
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(t.name.size()));
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    detail::put<std::uint32_t>(os, 2);
    detail::put<std::uint64_t>(os, static_cast<std::uint64_t>(t.rows));
    detail::put<std::uint64_t>(os, static_cast<std::uint64_t>(t.cols));
    os.write(reinterpret_cast<const char*>(t.data), static_cast<std::streamsize>(t.size() * 4));
  }
  if (!os) throw LoadError("failed writing checkpoint " + path.string());
}

inline ModelCheckpoint load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw LoadError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
    throw LoadError(path.string() + " is not a checkpoint (bad magic)");
  const auto version = detail::get<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion)
    throw LoadError("unsupported checkpoint version " + std::to_string(version));
  const auto hlen = detail::get<std::uint64_t>(is, "header length");
  if (hlen > (1u << 24)) throw LoadError("checkpoint header implausibly large");
  std::string header(hlen, '\0');
  if (!is.read(header.data(), static_cast<std::streamsize>(hlen)))
    throw LoadError("checkpoint truncated in header");
  ModelCheckpoint m;
  try {
    const auto j = nlohmann::json::parse(header);
    m.config = model_config_from_json(j.at("config"));
    const auto& f = j.at("fingerprint");
    m.fingerprint.corpus_hash = f.at("corpus_hash").get<std::string>();
    m.fingerprint.epochs = f.at("epochs").get<int>();
    m.fingerprint.seed = f.at("seed").get<std::uint64_t>();
    m.fingerprint.replay_loss = f.at("replay_loss").get<double>();
    m.fingerprint.replay_batch = f.at("replay_batch").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("bad checkpoint header: ") + e.what());
  }
  m.config.check(DepthCheck::relaxed);
  m.params = Params<float>::zeros(m.config);
  auto tensors = m.params.tensors();
  const auto count = detail::get<std::uint32_t>(is, "tensor count");
  if (count != tensors.size())
    throw LoadError("checkpoint has " + std::to_string(count) + " tensors, config implies " +
                    std::to_string(tensors.size()));
  for (auto& t : tensors) {
    const auto nlen = detail::get<std::uint32_t>(is, "tensor name length");
    if (nlen > 4096) throw LoadError("tensor name implausibly long");
    std::string name(nlen, '\0');
    if (!is.read(name.data(), nlen)) throw LoadError("checkpoint truncated in tensor name");
    if (name != t.name) throw LoadError("expected tensor '" + t.name + "', found '" + name + "'");
    const auto ndim = detail::get<std::uint32_t>(is, "ndim");
    if (ndim != 2) throw LoadError("tensor '" + name + "' has unexpected rank");
    const auto rows = detail::get<std::uint64_t>(is, "dims");
    const auto cols = detail::get<std::uint64_t>(is, "dims");
    if (rows != static_cast<std::uint64_t>(t.rows) || cols != static_cast<std::uint64_t>(t.cols))
      throw LoadError("tensor '" + name + "' shape mismatch");
    if (!is.read(reinterpret_cast<char*>(t.data), static_cast<std::streamsize>(t.size() * 4)))
      throw LoadError("checkpoint truncated in tensor '" + name + "'");
    for (Eigen::Index k = 0; k < t.size(); ++k)
      if (!std::isfinite(t.data[k])) throw LoadError("non-finite value in tensor '" + name + "'");
  }
  if (is.peek() != std::char_traits<char>::eof()) throw LoadError("trailing bytes after checkpoint");
  return m;
}

}  // namespace mtbd
