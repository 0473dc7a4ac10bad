#include "protolab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "protolab/serialize.hpp"

namespace protolab {

namespace {

constexpr char kMagic[4] = {'P', 'L', 'C', 'K'};

template <typename T>
void put_le(std::string& out, T v) {
  static_assert(std::is_integral_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

template <typename T>
T get_le(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw DataError("checkpoint truncated");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += sizeof(T);
  return static_cast<T>(v);
}

void put_float(std::string& out, float f) { put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f)); }
float get_float(const std::string& in, std::size_t& pos) { return std::bit_cast<float>(get_le<std::uint32_t>(in, pos)); }

}  // namespace

std::string serialize_checkpoint(const Model& m) {
  nlohmann::json desc;
  desc["config"] = m.config;
  desc["token_count"] = m.bank.token_count;
  if (m.bank.class_assignment) desc["class_assignment"] = *m.bank.class_assignment;
  nlohmann::json prov = nlohmann::json::array();
  for (const auto& p : m.bank.provenance) prov.push_back(p ? nlohmann::json(*p) : nlohmann::json(nullptr));
  desc["provenance"] = prov;
  nlohmann::json arrays = nlohmann::json::array();
  visit_params(const_cast<Model&>(m), [&](const std::string& name, ParamGroup g, Matrix<float>& a) {
    arrays.push_back({{"name", name}, {"group", to_string(g)}, {"rows", a.rows()}, {"cols", a.cols()}});
  });
  desc["arrays"] = arrays;
  const std::string text = desc.dump();

  std::string out(kMagic, 4);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, text.size());
  out += text;
  visit_params(const_cast<Model&>(m), [&](const std::string&, ParamGroup, Matrix<float>& a) {
    for (Eigen::Index i = 0; i < a.size(); ++i) put_float(out, a.data()[i]);
  });
  return out;
}

Model deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw DataError("not a protolab checkpoint");
  std::size_t pos = 4;
  const auto version = get_le<std::uint32_t>(bytes, pos);
  if (version != kCheckpointVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
  const auto len = get_le<std::uint64_t>(bytes, pos);
  if (pos + len > bytes.size()) throw DataError("checkpoint truncated");
  const nlohmann::json desc = nlohmann::json::parse(bytes.substr(pos, len));
  pos += len;

  ModelConfig cfg = desc.at("config").get<ModelConfig>();
  Model m = init_model<float>(cfg);
  m.bank.token_count = desc.value("token_count", cfg.token_count);
  if (desc.contains("class_assignment")) {
    m.bank.class_assignment = desc.at("class_assignment").get<std::vector<int>>();
  } else {
    m.bank.class_assignment.reset();
  }
  m.bank.provenance.clear();
  for (const auto& p : desc.at("provenance"))
    m.bank.provenance.push_back(p.is_null() ? std::nullopt : std::optional<ProvenanceRecord>(p.get<ProvenanceRecord>()));

  const auto& arrays = desc.at("arrays");
  std::size_t k = 0;
  visit_params(m, [&](const std::string& name, ParamGroup, Matrix<float>& a) {
    if (k >= arrays.size()) throw DataError("checkpoint is missing array '" + name + "'");
    const auto& e = arrays[k++];
    if (e.at("name").get<std::string>() != name) throw DataError("checkpoint array order mismatch at '" + name + "'");
    const auto rows = e.at("rows").get<Eigen::Index>(), cols = e.at("cols").get<Eigen::Index>();
    if (rows != a.rows() || cols != a.cols()) throw DataError("checkpoint array '" + name + "' has an unexpected shape");
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = get_float(bytes, pos);
  });
  if (k != arrays.size()) throw DataError("checkpoint has unexpected extra arrays");
  if (pos != bytes.size()) throw DataError("checkpoint has trailing bytes");
  return m;
}

void save_checkpoint(const Model& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint '" + path.string() + "'");
  const std::string bytes = serialize_checkpoint(m);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint '" + path.string() + "'");
  std::ostringstream s;
  s << in.rdbuf();
  return deserialize_checkpoint(s.str());
}

}  // namespace protolab
