#include "capsroute/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

#include <json.hpp>

namespace capsroute {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'C', 'A', 'P', 'S', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

void write_u32(std::ofstream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint32_t read_u32(std::ifstream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}

json activation_to_json(const ActivationFn& a) {
  json j;
  switch (a.kind) {
    case ActivationFn::Kind::OriginalSquash:
      j["kind"] = "squash";
      break;
    case ActivationFn::Kind::CISquash:
      j["kind"] = "ci";
      break;
    case ActivationFn::Kind::PoweredActivation:
      j["kind"] = "pa";
      break;
  }
  j["ci_bar"] = a.ci_bar;
  j["ci_exponent"] = a.ci_exponent;
  j["pa_n"] = a.pa_n;
  return j;
}

ActivationFn activation_from_json(const json& j) {
  ActivationFn a;
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "squash") {
    a.kind = ActivationFn::Kind::OriginalSquash;
  } else if (kind == "ci") {
    a.kind = ActivationFn::Kind::CISquash;
  } else if (kind == "pa") {
    a.kind = ActivationFn::Kind::PoweredActivation;
  } else {
    throw std::runtime_error("checkpoint: unknown activation kind '" + kind + "'");
  }
  a.ci_bar = j.at("ci_bar").get<double>();
  a.ci_exponent = j.at("ci_exponent").get<int>();
  a.pa_n = j.at("pa_n").get<int>();
  return a;
}

json config_to_json(const NetworkConfig& c) {
  json j;
  j["in_channels"] = c.in_channels;
  j["in_h"] = c.in_h;
  j["in_w"] = c.in_w;
  j["conv1_channels"] = c.conv1_channels;
  j["conv1_pad"] = c.conv1_pad;
  j["kernel"] = c.kernel;
  j["prim_channels"] = c.prim_channels;
  j["prim_dim"] = c.prim_dim;
  j["digit_dim"] = c.digit_dim;
  j["num_classes"] = c.num_classes;
  j["routing_iters"] = c.routing_iters;
  j["activation"] = activation_to_json(c.activation);
  return j;
}

NetworkConfig config_from_json(const json& j) {
  NetworkConfig c;
  c.in_channels = j.at("in_channels").get<std::size_t>();
  c.in_h = j.at("in_h").get<std::size_t>();
  c.in_w = j.at("in_w").get<std::size_t>();
  c.conv1_channels = j.at("conv1_channels").get<std::size_t>();
  c.conv1_pad = j.at("conv1_pad").get<std::size_t>();
  c.kernel = j.at("kernel").get<std::size_t>();
  c.prim_channels = j.at("prim_channels").get<std::size_t>();
  c.prim_dim = j.at("prim_dim").get<std::size_t>();
  c.digit_dim = j.at("digit_dim").get<std::size_t>();
  c.num_classes = j.at("num_classes").get<std::size_t>();
  c.routing_iters = j.at("routing_iters").get<int>();
  c.activation = activation_from_json(j.at("activation"));
  return c;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& file) {
  json header;
  header["step"] = ckpt.step;
  header["config_hash"] = ckpt.config_hash;
  header["arch"] = config_to_json(ckpt.config);
  json table = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, tensor] : ckpt.params.entries()) {
    json entry;
    entry["name"] = name;
    entry["shape"] = tensor->shape();
    entry["offset"] = offset;
    entry["count"] = tensor->size();
    table.push_back(entry);
    offset += tensor->size() * sizeof(double);
  }
  header["tensors"] = table;
  const std::string header_str = header.dump();

  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw std::runtime_error("checkpoint: cannot open " + file.string() +
                             " for writing");
  }
  out.write(kMagic, sizeof(kMagic));
  write_u32(out, kVersion);
  write_u32(out, static_cast<std::uint32_t>(header_str.size()));
  out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  for (const auto& [name, tensor] : ckpt.params.entries()) {
    out.write(reinterpret_cast<const char*>(tensor->data()),
              static_cast<std::streamsize>(tensor->size() * sizeof(double)));
  }
  if (!out) {
    throw std::runtime_error("checkpoint: write failed for " + file.string());
  }
}

Checkpoint load_checkpoint(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) {
    throw std::runtime_error("checkpoint: cannot open " + file.string());
  }
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("checkpoint: bad magic in " + file.string());
  }
  const std::uint32_t version = read_u32(in);
  if (version != kVersion) {
    throw std::runtime_error("checkpoint: unsupported version " +
                             std::to_string(version));
  }
  const std::uint32_t header_len = read_u32(in);
  std::string header_str(header_len, '\0');
  in.read(header_str.data(), header_len);
  if (!in) {
    throw std::runtime_error("checkpoint: truncated header in " + file.string());
  }
  const json header = json::parse(header_str);

  Checkpoint ckpt;
  ckpt.step = header.at("step").get<std::uint64_t>();
  ckpt.config_hash = header.at("config_hash").get<std::string>();
  ckpt.config = config_from_json(header.at("arch"));

  const std::streampos data_start = in.tellg();
  for (const auto& entry : header.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
    const auto offset = entry.at("offset").get<std::uint64_t>();
    const auto count = entry.at("count").get<std::uint64_t>();
    if (shape_product(shape) != count) {
      throw std::runtime_error("checkpoint: tensor '" + name +
                               "' shape/count mismatch");
    }
    Tensor t(shape);
    in.seekg(data_start + static_cast<std::streamoff>(offset));
    in.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(count * sizeof(double)));
    if (!in) {
      throw std::runtime_error("checkpoint: truncated tensor '" + name + "'");
    }
    bool placed = false;
    for (auto& [pname, ptensor] : ckpt.params.entries()) {
      if (name == pname) {
        *ptensor = std::move(t);
        placed = true;
        break;
      }
    }
    if (!placed) {
      throw std::runtime_error("checkpoint: unknown tensor '" + name + "'");
    }
  }
  return ckpt;
}

}  // namespace capsroute
