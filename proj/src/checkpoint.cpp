// Checkpoint layout (all integers little-endian):
//   "PBCK" | u32 version | u64 header length | JSON header | f64 payload | u64 CRC-64/XZ
// The CRC covers every byte before it. Parameters are stored layer by layer,
// weight then bias, in row-major order.

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <boost/crc.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "advkit/errors.hpp"
#include "advkit/models.hpp"

namespace advkit {

namespace {

constexpr char kMagic[4] = {'P', 'B', 'C', 'K'};
constexpr std::size_t kPreamble = 4 + 4 + 8;

using Crc64Xz = boost::crc_optimal<64, 0x42F0E1EBA9EA3693ULL, 0xFFFFFFFFFFFFFFFFULL, 0xFFFFFFFFFFFFFFFFULL,
                                   true, true>;

template <typename T>
void put_le(std::vector<unsigned char>& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<unsigned char>(value >> (8 * i)));
}

template <typename T>
T get_le(const unsigned char* p) {
  T value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) value |= static_cast<T>(p[i]) << (8 * i);
  return value;
}

nlohmann::json header_json(const ModelParams& model) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& layer : model.layers) {
    layers.push_back({{"kind", layer_kind_name(layer.kind)},
                      {"in", layer.in},
                      {"out", layer.out},
                      {"kernel", layer.kernel},
                      {"stride", layer.stride}});
  }
  return {{"name", model.meta.name},
          {"seed", model.meta.seed},
          {"training_mode", training_mode_name(model.meta.training_mode)},
          {"geometry", {model.input.channels, model.input.height, model.input.width}},
          {"classes", model.classes},
          {"layers", layers},
          {"parameter_count", model.parameter_count()}};
}

}  // namespace

std::uint64_t crc64(std::span<const unsigned char> bytes) {
  Crc64Xz crc;
  crc.process_bytes(bytes.data(), bytes.size());
  return crc.checksum();
}

void save_checkpoint(const ModelParams& model, const std::filesystem::path& path) {
  const std::string header = header_json(model).dump();
  std::vector<unsigned char> bytes(std::begin(kMagic), std::end(kMagic));
  put_le<std::uint32_t>(bytes, kCheckpointVersion);
  put_le<std::uint64_t>(bytes, header.size());
  bytes.insert(bytes.end(), header.begin(), header.end());
  auto put_tensor = [&](const Tensor& t) {
    for (double v : t.data()) put_le<std::uint64_t>(bytes, std::bit_cast<std::uint64_t>(v));
  };
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    put_tensor(model.weights[i]);
    put_tensor(model.biases[i]);
  }
  put_le<std::uint64_t>(bytes, crc64(bytes));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(fmt::format("cannot open '{}' for writing", path.string()));
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError(fmt::format("write to '{}' failed", path.string()));
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(fmt::format("cannot open '{}' for reading", path.string()));
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = path.string();

  if (bytes.size() < kPreamble) throw TruncatedError(fmt::format("'{}': truncated preamble", where));
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError(fmt::format("'{}': missing PBCK magic", where));
  const auto version = get_le<std::uint32_t>(bytes.data() + 4);
  if (version != kCheckpointVersion) {
    throw VersionError(fmt::format("'{}': checkpoint version {} is not supported (this build reads version {})",
                                   where, version, kCheckpointVersion));
  }
  const auto header_len = get_le<std::uint64_t>(bytes.data() + 8);
  if (header_len > bytes.size() - kPreamble) throw TruncatedError(fmt::format("'{}': truncated header", where));

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + kPreamble,
                                   bytes.begin() + static_cast<std::ptrdiff_t>(kPreamble + header_len));
  } catch (const nlohmann::json::exception& e) {
    // A damaged header is reported as a checksum failure when the CRC disagrees.
    if (bytes.size() >= kPreamble + header_len + 8) {
      const std::size_t body = bytes.size() - 8;
      if (crc64({bytes.data(), body}) != get_le<std::uint64_t>(bytes.data() + body)) {
        throw ChecksumError(fmt::format("'{}': checksum mismatch", where));
      }
    }
    throw FormatError(fmt::format("'{}': malformed header: {}", where, e.what()));
  }

  std::size_t param_count = 0;
  try {
    param_count = header.at("parameter_count").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(fmt::format("'{}': header lacks parameter_count", where));
  }
  const std::size_t expected = kPreamble + header_len + param_count * 8 + 8;
  if (bytes.size() < expected) {
    throw TruncatedError(fmt::format("'{}': {} bytes, expected {}", where, bytes.size(), expected));
  }
  if (bytes.size() > expected) throw FormatError(fmt::format("'{}': {} trailing bytes", where, bytes.size() - expected));
  const std::size_t body = expected - 8;
  const auto stored = get_le<std::uint64_t>(bytes.data() + body);
  const auto actual = crc64({bytes.data(), body});
  if (stored != actual) {
    throw ChecksumError(fmt::format("'{}': checksum mismatch (stored {:016x}, computed {:016x})", where, stored, actual));
  }

  ModelSpec spec;
  try {
    spec.name = header.at("name").get<std::string>();
    const auto geom = header.at("geometry").get<std::vector<std::size_t>>();
    if (geom.size() != 3) throw FormatError(fmt::format("'{}': geometry must have 3 entries", where));
    spec.input = {geom[0], geom[1], geom[2]};
    spec.classes = header.at("classes").get<std::size_t>();
    for (const auto& l : header.at("layers")) {
      spec.layers.push_back({parse_layer_kind(l.at("kind").get<std::string>()), l.at("in").get<std::size_t>(),
                             l.at("out").get<std::size_t>(), l.at("kernel").get<std::size_t>(),
                             l.at("stride").get<std::size_t>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(fmt::format("'{}': malformed header: {}", where, e.what()));
  }

  ModelParams model = init_model(spec, 0);
  model.meta.seed = header.at("seed").get<std::uint64_t>();
  model.meta.training_mode = parse_training_mode(header.at("training_mode").get<std::string>());
  if (model.parameter_count() != param_count) {
    throw FormatError(fmt::format("'{}': architecture holds {} parameters, header declares {}", where,
                                  model.parameter_count(), param_count));
  }
  const unsigned char* p = bytes.data() + kPreamble + header_len;
  auto fill = [&p](Tensor& t) {
    for (auto& v : t.data()) {
      v = std::bit_cast<double>(get_le<std::uint64_t>(p));
      p += 8;
    }
  };
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    fill(model.weights[i]);
    fill(model.biases[i]);
  }
  return model;
}

}  // namespace advkit
