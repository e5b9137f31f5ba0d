#include "s2c/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

namespace s2c {

namespace {

using Kind = CheckpointError::Kind;

class ByteWriter {
 public:
  template <std::unsigned_integral T>
  void put(T value) {
    for (std::size_t i = 0; i < sizeof(T); ++i) bytes_.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const char*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  template <RealScalar Scalar>
  void put_tensor(const Tensor<Scalar>& t) {
    using Bits = std::conditional_t<sizeof(Scalar) == 4, std::uint32_t, std::uint64_t>;
    if constexpr (std::endian::native == std::endian::little) {
      put_bytes(t.data(), sizeof(Scalar) * static_cast<std::size_t>(t.size()));
    } else {
      for (Index i = 0; i < t.size(); ++i) put(std::bit_cast<Bits>(t[i]));
    }
  }
  std::size_t size() const { return bytes_.size(); }
  const std::vector<char>& bytes() const { return bytes_; }

 private:
  std::vector<char> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<char>& bytes) : bytes_(bytes) {}

  void need(std::size_t n, const std::string& what) const {
    if (pos_ + n > bytes_.size()) throw CheckpointError(Kind::truncated, "checkpoint truncated while reading " + what);
  }
  template <std::unsigned_integral T>
  T get(const std::string& what) {
    need(sizeof(T), what);
    T value = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      value |= static_cast<T>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return value;
  }
  std::string get_string(std::size_t n, const std::string& what) {
    need(n, what);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  std::size_t size() const { return bytes_.size(); }
  const char* at(std::size_t offset) const { return bytes_.data() + offset; }

 private:
  const std::vector<char>& bytes_;
  std::size_t pos_ = 0;
};

template <RealScalar Scalar>
void read_tensor_blob(const char* src, Tensor<Scalar>& t) {
  using Bits = std::conditional_t<sizeof(Scalar) == 4, std::uint32_t, std::uint64_t>;
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(t.data(), src, sizeof(Scalar) * static_cast<std::size_t>(t.size()));
  } else {
    for (Index i = 0; i < t.size(); ++i) {
      Bits b = 0;
      for (std::size_t k = 0; k < sizeof(Bits); ++k) {
        b |= static_cast<Bits>(static_cast<unsigned char>(src[i * sizeof(Bits) + k])) << (8 * k);
      }
      t[i] = std::bit_cast<Scalar>(b);
    }
  }
}

std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(Kind::io, "cannot open checkpoint " + path.string());
  return std::vector<char>(std::istreambuf_iterator<char>(in), {});
}

std::uint8_t read_prelude(ByteReader& r) {
  if (r.size() < 4) throw CheckpointError(Kind::truncated, "checkpoint truncated while reading magic");
  if (std::memcmp(r.at(0), checkpoint_magic, 4) != 0) throw CheckpointError(Kind::bad_magic, "not an S2C1 checkpoint (bad magic)");
  r.get_string(4, "magic");
  const auto version = r.get<std::uint8_t>("version");
  if (version != checkpoint_version) {
    throw CheckpointError(Kind::version_mismatch, "checkpoint version " + std::to_string(version) + ", expected " +
                                                      std::to_string(checkpoint_version));
  }
  const auto precision = r.get<std::uint8_t>("precision");
  if (precision != 4 && precision != 8) throw CheckpointError(Kind::malformed_header, "unknown checkpoint precision");
  r.get<std::uint16_t>("reserved");
  return precision;
}

struct IndexEntry {
  std::string key;
  Shape shape;
  std::uint64_t offset = 0;
  std::uint64_t bytes = 0;
};

}  // namespace

template <RealScalar Scalar>
nlohmann::json topology_json(const SeriesNetwork<Scalar>& net) {
  using nlohmann::json;
  json edges = json::array();
  for (const auto& e : net.edges()) {
    edges.push_back({{"name", e.name.str()},
                     {"from", e.from},
                     {"to", e.to},
                     {"in_channels", e.conv.in_channels()},
                     {"out_channels", e.conv.out_channels()},
                     {"kernel", e.kernel()},
                     {"stride", e.conv.stride},
                     {"padding", e.conv.padding},
                     {"origin_stage", e.origin_stage},
                     {"role", std::string(role_name(e.role))},
                     {"bn_epsilon", static_cast<double>(e.bn.epsilon)},
                     {"bn_ema_decay", static_cast<double>(e.bn.ema_decay)}});
  }
  const auto& g = net.input_geometry();
  return json{{"input", {{"channels", g.channels}, {"height", g.height}, {"width", g.width}}},
              {"classes", net.classes()},
              {"node_count", net.node_count()},
              {"input_node", net.input_node()},
              {"output_node", net.output_node()},
              {"stage_count", net.stage_count()},
              {"activation", "relu"},
              {"edges", edges},
              {"head", {{"classes", net.head().classes()}, {"features", net.head().features()}}}};
}

template <RealScalar Scalar>
void save_checkpoint(const std::filesystem::path& path, const TrainingSnapshot<Scalar>& snapshot) {
  const auto& net = snapshot.net;
  nlohmann::json header = topology_json(net);
  header["format"] = "s2c-checkpoint";
  header["step"] = snapshot.step;
  header["rng_state"] = snapshot.rng_state;
  header["metadata"] = snapshot.metadata;
  const std::string header_text = header.dump(1);

  std::vector<std::pair<std::string, const Tensor<Scalar>*>> tensors;
  for (const auto& [key, t] : net.parameters()) tensors.emplace_back("param/" + key, t);
  for (const auto& e : net.edges()) {
    tensors.emplace_back("running_mean/" + e.name.str(), &e.bn.running_mean);
    tensors.emplace_back("running_var/" + e.name.str(), &e.bn.running_var);
  }
  for (const auto& [key, t] : snapshot.ema_shadows) tensors.emplace_back("ema/" + key, &t);
  for (const auto& [key, t] : snapshot.velocities) tensors.emplace_back("velocity/" + key, &t);

  ByteWriter w;
  w.put_bytes(checkpoint_magic, 4);
  w.put<std::uint8_t>(checkpoint_version);
  w.put<std::uint8_t>(sizeof(Scalar));
  w.put<std::uint16_t>(0);
  w.put<std::uint64_t>(header_text.size());
  w.put_bytes(header_text.data(), header_text.size());
  w.put<std::uint64_t>(tensors.size());
  std::uint64_t offset = 0;
  for (const auto& [key, t] : tensors) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(key.size()));
    w.put_bytes(key.data(), key.size());
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t->rank()));
    for (Index d : t->shape()) w.put<std::uint64_t>(static_cast<std::uint64_t>(d));
    const std::uint64_t bytes = sizeof(Scalar) * static_cast<std::uint64_t>(t->size());
    w.put<std::uint64_t>(offset);
    w.put<std::uint64_t>(bytes);
    offset += bytes;
  }
  w.put<std::uint64_t>(offset);
  for (const auto& [key, t] : tensors) w.put_tensor(*t);

  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(Kind::io, "cannot write checkpoint " + path.string());
    out.write(w.bytes().data(), static_cast<std::streamsize>(w.size()));
    if (!out) throw CheckpointError(Kind::io, "short write on checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Precision peek_checkpoint_precision(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  ByteReader r(bytes);
  return read_prelude(r) == 4 ? Precision::single : Precision::double_;
}

template <RealScalar Scalar>
TrainingSnapshot<Scalar> load_checkpoint(const std::filesystem::path& path) {
  using nlohmann::json;
  const auto bytes = read_file(path);
  ByteReader r(bytes);
  if (read_prelude(r) != sizeof(Scalar)) {
    throw CheckpointError(Kind::precision_mismatch, "checkpoint precision differs from the requested precision");
  }
  const auto header_len = r.get<std::uint64_t>("header length");
  json header;
  try {
    header = json::parse(r.get_string(header_len, "topology header"));
  } catch (const json::parse_error& e) {
    throw CheckpointError(Kind::malformed_header, std::string("unparseable topology header: ") + e.what());
  }

  const auto count = r.get<std::uint64_t>("tensor count");
  std::vector<IndexEntry> index;
  for (std::uint64_t i = 0; i < count; ++i) {
    IndexEntry e;
    const auto key_len = r.get<std::uint32_t>("tensor index");
    e.key = r.get_string(key_len, "tensor index");
    const auto rank = r.get<std::uint32_t>("tensor index entry " + e.key);
    for (std::uint32_t d = 0; d < rank; ++d) e.shape.push_back(static_cast<Index>(r.get<std::uint64_t>("tensor index entry " + e.key)));
    e.offset = r.get<std::uint64_t>("tensor index entry " + e.key);
    e.bytes = r.get<std::uint64_t>("tensor index entry " + e.key);
    index.push_back(std::move(e));
  }
  const auto blob_len = r.get<std::uint64_t>("blob section length");
  const std::size_t blob_start = r.pos();

  std::map<std::string, const IndexEntry*> by_key;
  std::uint64_t expected_offset = 0;
  for (const auto& e : index) {
    if (!by_key.emplace(e.key, &e).second) throw CheckpointError(Kind::index_inconsistent, "duplicate tensor " + e.key);
    if (e.shape.empty()) throw CheckpointError(Kind::index_inconsistent, "tensor " + e.key + " has no extents");
    for (Index d : e.shape) {
      if (d < 1) throw CheckpointError(Kind::index_inconsistent, "tensor " + e.key + " has a zero extent");
    }
    if (e.bytes != sizeof(Scalar) * static_cast<std::uint64_t>(shape_product(e.shape))) {
      throw CheckpointError(Kind::index_inconsistent, "tensor " + e.key + " byte length disagrees with its shape");
    }
    if (e.offset != expected_offset || e.offset + e.bytes > blob_len) {
      throw CheckpointError(Kind::index_inconsistent, "tensor " + e.key + " lies outside the blob layout");
    }
    expected_offset += e.bytes;
  }
  if (expected_offset != blob_len) throw CheckpointError(Kind::index_inconsistent, "blob section length mismatch");
  for (const auto& e : index) {
    if (blob_start + e.offset + e.bytes > bytes.size()) {
      throw CheckpointError(Kind::truncated, "checkpoint truncated: tensor " + e.key + " is missing");
    }
  }
  if (blob_start + blob_len != bytes.size()) {
    throw CheckpointError(Kind::index_inconsistent, "trailing bytes after blob section");
  }

  auto fetch = [&](const std::string& key, const Shape& shape) {
    auto it = by_key.find(key);
    if (it == by_key.end()) throw CheckpointError(Kind::index_inconsistent, "tensor " + key + " is not indexed");
    if (it->second->shape != shape) {
      throw CheckpointError(Kind::index_inconsistent, "tensor " + key + " shape " + shape_string(it->second->shape) +
                                                          " disagrees with topology " + shape_string(shape));
    }
    Tensor<Scalar> t(shape);
    read_tensor_blob(bytes.data() + blob_start + it->second->offset, t);
    return t;
  };

  TrainingSnapshot<Scalar> snap;
  try {
    const auto& in = header.at("input");
    SeriesNetwork<Scalar> net(ImageGeometry{in.at("channels").get<Index>(), in.at("height").get<Index>(),
                                            in.at("width").get<Index>()},
                              header.at("classes").get<Index>());
    const Index nodes = header.at("node_count").get<Index>();
    while (net.node_count() < nodes) net.add_node();
    for (const auto& je : header.at("edges")) {
      Edge<Scalar> e;
      e.name = LayerName::parse(je.at("name").get<std::string>());
      e.from = je.at("from").get<NodeId>();
      e.to = je.at("to").get<NodeId>();
      e.origin_stage = je.at("origin_stage").get<int>();
      const auto role = je.at("role").get<std::string>();
      e.role = role == "backbone" ? EdgeRole::backbone : role == "path_first" ? EdgeRole::path_first : EdgeRole::path_second;
      const Index oc = je.at("out_channels").get<Index>(), ic = je.at("in_channels").get<Index>();
      const Index k = je.at("kernel").get<Index>();
      e.conv.stride = je.at("stride").get<Index>();
      e.conv.padding = je.at("padding").get<Index>();
      e.conv.weights = fetch("param/" + weights_key(e.name), {oc, ic, k, k});
      e.bn.gamma = fetch("param/" + gamma_key(e.name), {oc});
      e.bn.beta = fetch("param/" + beta_key(e.name), {oc});
      e.bn.running_mean = fetch("running_mean/" + e.name.str(), {oc});
      e.bn.running_var = fetch("running_var/" + e.name.str(), {oc});
      e.bn.epsilon = static_cast<Scalar>(je.at("bn_epsilon").get<double>());
      e.bn.ema_decay = static_cast<Scalar>(je.at("bn_ema_decay").get<double>());
      net.add_edge(std::move(e));
    }
    const Index classes = header.at("head").at("classes").get<Index>();
    const Index features = header.at("head").at("features").get<Index>();
    net.set_head({fetch("param/" + head_weights_key, {classes, features}), fetch("param/" + head_bias_key, {classes})});
    net.set_stage_count(header.at("stage_count").get<int>());
    net.validate();
    snap.net = std::move(net);
    snap.step = header.at("step").get<std::uint64_t>();
    snap.rng_state = header.at("rng_state").get<std::string>();
    snap.metadata = header.value("metadata", json::object());
  } catch (const json::exception& e) {
    throw CheckpointError(Kind::malformed_header, std::string("topology header: ") + e.what());
  } catch (const GraphError& e) {
    throw CheckpointError(Kind::malformed_header, std::string("topology header: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(Kind::malformed_header, std::string("topology header: ") + e.what());
  }

  const auto params = snap.net.parameters();
  std::set<std::string> known;
  for (const auto& [key, t] : params) {
    known.insert("param/" + key);
    for (const char* prefix : {"ema/", "velocity/"}) {
      const std::string k = prefix + key;
      if (!by_key.count(k)) continue;
      auto& dst = std::string(prefix) == "ema/" ? snap.ema_shadows : snap.velocities;
      dst.emplace(key, fetch(k, t->shape()));
      known.insert(k);
    }
  }
  for (const auto& e : snap.net.edges()) {
    known.insert("running_mean/" + e.name.str());
    known.insert("running_var/" + e.name.str());
  }
  for (const auto& e : index) {
    if (!known.count(e.key)) throw CheckpointError(Kind::index_inconsistent, "tensor " + e.key + " belongs to no parameter");
  }
  snap.net.touch();
  return snap;
}

template void save_checkpoint(const std::filesystem::path&, const TrainingSnapshot<float>&);
template void save_checkpoint(const std::filesystem::path&, const TrainingSnapshot<double>&);
template TrainingSnapshot<float> load_checkpoint(const std::filesystem::path&);
template TrainingSnapshot<double> load_checkpoint(const std::filesystem::path&);
template nlohmann::json topology_json(const SeriesNetwork<float>&);
template nlohmann::json topology_json(const SeriesNetwork<double>&);

}  // namespace s2c
