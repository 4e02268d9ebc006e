#include "permflow/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "permflow/errors.hpp"

namespace permflow {

namespace {

constexpr std::array<char, 8> kMagic = {'P', 'F', 'L', 'O', 'W', 'C', 'K', 'P'};

template <typename T>
void put_le(std::ostream& out, T value) {
  std::array<char, sizeof(T)> bytes{};
  for (std::size_t i = 0; i < sizeof(T); ++i) bytes[i] = static_cast<char>((value >> (8 * i)) & 0xff);
  out.write(bytes.data(), bytes.size());
}

template <typename T>
T get_le(std::istream& in, const std::string& source) {
  std::array<unsigned char, sizeof(T)> bytes{};
  if (!in.read(reinterpret_cast<char*>(bytes.data()), bytes.size())) {
    throw DataError(fmt::format("{}: truncated checkpoint", source));
  }
  T value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) value |= static_cast<T>(bytes[i]) << (8 * i);
  return value;
}

struct Writer {
  std::vector<double> payload;

  nlohmann::json layer(const DenseLayer& l) {
    nlohmann::json j{{"name", l.weight.name.substr(0, l.weight.name.rfind('.'))},
                     {"in", l.in_features()},
                     {"out", l.out_features()},
                     {"activation", to_string(l.activation)},
                     {"weight_offset", payload.size()}};
    payload.insert(payload.end(), l.weight.value.values().begin(), l.weight.value.values().end());
    j["bias_offset"] = payload.size();
    payload.insert(payload.end(), l.bias.value.values().begin(), l.bias.value.values().end());
    return j;
  }

  nlohmann::json net(const Mlp& m) {
    nlohmann::json j = nlohmann::json::array();
    for (const DenseLayer& l : m.layers()) j.push_back(layer(l));
    return j;
  }
};

DenseLayer read_layer(const nlohmann::json& j, const std::vector<double>& payload, const std::string& source) {
  const auto in = j.at("in").get<std::size_t>();
  const auto out = j.at("out").get<std::size_t>();
  const auto w_off = j.at("weight_offset").get<std::size_t>();
  const auto b_off = j.at("bias_offset").get<std::size_t>();
  if (w_off + in * out > payload.size() || b_off + out > payload.size()) {
    throw DataError(fmt::format("{}: layer offsets exceed payload", source));
  }
  const auto name = j.at("name").get<std::string>();
  DenseLayer layer;
  layer.weight = Parameter(name + ".weight",
                           DenseArray({in, out}, std::vector<double>(payload.begin() + static_cast<std::ptrdiff_t>(w_off),
                                                                     payload.begin() + static_cast<std::ptrdiff_t>(w_off + in * out))));
  layer.bias = Parameter(name + ".bias",
                         DenseArray({out}, std::vector<double>(payload.begin() + static_cast<std::ptrdiff_t>(b_off),
                                                               payload.begin() + static_cast<std::ptrdiff_t>(b_off + out))));
  layer.activation = activation_from_string(j.at("activation").get<std::string>());
  return layer;
}

Mlp read_net(const nlohmann::json& j, const std::vector<double>& payload, const std::string& source) {
  std::vector<DenseLayer> layers;
  for (const auto& l : j) layers.push_back(read_layer(l, payload, source));
  if (layers.empty()) throw DataError(fmt::format("{}: empty network", source));
  for (std::size_t i = 1; i < layers.size(); ++i) {
    if (layers[i].in_features() != layers[i - 1].out_features()) {
      throw DataError(fmt::format("{}: layer shapes do not chain", source));
    }
  }
  return Mlp(std::move(layers));
}

}  // namespace

void write_checkpoint(std::ostream& out, const FlowModel& flow, const SelfSupHead* head) {
  Writer w;
  nlohmann::json header{{"format_version", kCheckpointVersion},
                        {"byte_order", "little"},
                        {"real_type", "binary64"},
                        {"input_dim", flow.dim()},
                        {"layers", nlohmann::json::array()}};
  for (const CouplingLayer& layer : flow.layers()) {
    std::vector<int> mask;
    for (const double m : layer.mask()) mask.push_back(m != 0.0 ? 1 : 0);
    header["layers"].push_back({{"mask", mask}, {"scale_net", w.net(layer.scale_net())}, {"shift_net", w.net(layer.shift_net())}});
  }
  header["head"] = head != nullptr ? w.layer(head->layer()) : nlohmann::json(nullptr);
  header["value_count"] = w.payload.size();

  const std::string text = header.dump();
  out.write(kMagic.data(), kMagic.size());
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const double v : w.payload) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
}

void save_checkpoint(const std::filesystem::path& path, const FlowModel& flow, const SelfSupHead* head) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(fmt::format("cannot write checkpoint {}", path.string()));
  write_checkpoint(out, flow, head);
  if (!out) throw DataError(fmt::format("failed writing checkpoint {}", path.string()));
}

Checkpoint read_checkpoint(std::istream& in, const std::string& source) {
  std::array<char, 8> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) {
    throw DataError(fmt::format("{}: not a permflow checkpoint", source));
  }
  const auto version = get_le<std::uint32_t>(in, source);
  if (version != kCheckpointVersion) {
    throw DataError(fmt::format("{}: unsupported checkpoint version {}", source, version));
  }
  const auto header_len = get_le<std::uint64_t>(in, source);
  if (header_len > (1ULL << 30)) throw DataError(fmt::format("{}: implausible header length", source));
  std::string text(header_len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(header_len))) {
    throw DataError(fmt::format("{}: truncated checkpoint header", source));
  }
  try {
    const auto header = nlohmann::json::parse(text);
    if (header.at("byte_order") != "little") throw DataError(fmt::format("{}: unsupported byte order", source));
    const auto count = header.at("value_count").get<std::size_t>();
    std::vector<double> payload(count);
    for (double& v : payload) v = std::bit_cast<double>(get_le<std::uint64_t>(in, source));

    std::vector<CouplingLayer> layers;
    for (const auto& l : header.at("layers")) {
      std::vector<double> mask;
      for (const int m : l.at("mask").get<std::vector<int>>()) mask.push_back(m != 0 ? 1.0 : 0.0);
      layers.emplace_back(std::move(mask), read_net(l.at("scale_net"), payload, source),
                          read_net(l.at("shift_net"), payload, source));
    }
    Checkpoint ckpt{FlowModel(std::move(layers)), std::nullopt};
    if (!header.at("head").is_null()) ckpt.head = SelfSupHead(read_layer(header["head"], payload, source));
    return ckpt;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(fmt::format("{}: malformed checkpoint header: {}", source, e.what()));
  } catch (const ContractError& e) {
    throw DataError(fmt::format("{}: inconsistent checkpoint: {}", source, e.what()));
  }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(fmt::format("cannot open checkpoint {}", path.string()));
  return read_checkpoint(in, path.string());
}

}  // namespace permflow
