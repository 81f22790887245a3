#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include "fundus/errors.hpp"
#include "fundus/train.hpp"

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace fundus::train {

namespace {

constexpr char kMagic[4] = {'F', 'N', 'K', 'T'};

class ByteWriter {
 public:
  template <class T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  void put_raw(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  void put_string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    put_raw(s.data(), s.size());
  }
  void put_tensor(const Tensor& t) {
    put(static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) put(static_cast<std::uint32_t>(d));
    put_raw(t.data().data(), t.size() * sizeof(float));
  }
  void put_chunk(const char tag[4], const ByteWriter& body) {
    put_raw(tag, 4);
    put(static_cast<std::uint64_t>(body.bytes_.size()));
    put_raw(body.bytes_.data(), body.bytes_.size());
  }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> bytes, std::string origin) : bytes_(bytes), origin_(std::move(origin)) {}

  template <class T>
  T get() {
    T v;
    std::memcpy(&v, take(sizeof(T)), sizeof(T));
    return v;
  }
  std::string get_string() {
    const std::uint32_t n = get<std::uint32_t>();
    const auto* p = take(n);
    return std::string(reinterpret_cast<const char*>(p), n);
  }
  Tensor get_tensor() {
    const std::uint32_t rank = get<std::uint32_t>();
    if (rank > 8) fail("tensor rank " + std::to_string(rank) + " is implausible");
    Shape shape(rank);
    std::size_t count = 1;
    for (auto& d : shape) {
      const std::uint32_t e = get<std::uint32_t>();
      if (e > (1u << 30)) fail("tensor extent " + std::to_string(e) + " is implausible");
      d = static_cast<int>(e);
      count *= e;
    }
    if (count > remaining() / sizeof(float)) fail("tensor data runs past the end of the file");
    std::vector<float> values(count);
    std::memcpy(values.data(), take(count * sizeof(float)), count * sizeof(float));
    return Tensor(std::move(shape), std::move(values));
  }
  ByteReader sub(std::size_t n) {
    const auto* p = take(n);
    return ByteReader(std::span<const std::uint8_t>(p, n), origin_);
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::size_t offset() const { return pos_; }
  [[noreturn]] void fail(const std::string& what) const {
    throw ParseError(origin_ + ": " + what + " (byte " + std::to_string(pos_) + ")");
  }

 private:
  const std::uint8_t* take(std::size_t n) {
    if (n > remaining()) fail("truncated");
    const auto* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::span<const std::uint8_t> bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  ByteWriter w;
  w.put_raw(kMagic, 4);
  w.put(ckpt.format_version);
  w.put(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    w.put_string(t.name);
    w.put_tensor(t.value);
  }

  ByteWriter meta;
  for (const auto& [k, v] : ckpt.meta) {
    const std::string line = k + "=" + v + "\n";
    meta.put_raw(line.data(), line.size());
  }
  w.put_chunk("META", meta);

  ByteWriter bn;
  bn.put(static_cast<std::uint32_t>(ckpt.bn_updates.size()));
  for (const auto& [name, count] : ckpt.bn_updates) {
    bn.put_string(name);
    bn.put(count);
  }
  w.put_chunk("BNST", bn);

  ByteWriter opt;
  opt.put(static_cast<std::uint32_t>(ckpt.optimizer.kind));
  opt.put(ckpt.optimizer.t);
  opt.put(static_cast<std::uint32_t>(ckpt.optimizer.m.size()));
  for (const auto& t : ckpt.optimizer.m) opt.put_tensor(t);
  opt.put(static_cast<std::uint32_t>(ckpt.optimizer.v.size()));
  for (const auto& t : ckpt.optimizer.v) opt.put_tensor(t);
  w.put_chunk("OPTM", opt);

  ByteWriter step;
  step.put(ckpt.step);
  step.put(static_cast<std::uint64_t>(ckpt.history.size()));
  for (double h : ckpt.history) step.put(h);
  w.put_chunk("STEP", step);

  ByteWriter rng;
  rng.put_raw(ckpt.rng_state.data(), ckpt.rng_state.size());
  w.put_chunk("RNGS", rng);

  w.put_chunk("END!", ByteWriter{});
  return std::move(w.bytes());
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = serialize_checkpoint(ckpt);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError(path.string() + ": cannot open for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError(path.string() + ": write failed");
}

Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes, const std::string& origin) {
  ByteReader r(bytes, origin);
  Checkpoint ckpt;
  char magic[4];
  for (char& c : magic) c = static_cast<char>(r.get<std::uint8_t>());
  if (std::memcmp(magic, kMagic, 4) != 0) r.fail("bad magic, not a checkpoint file");
  ckpt.format_version = r.get<std::uint32_t>();
  if (ckpt.format_version != kCheckpointVersion) {
    r.fail("unsupported format version " + std::to_string(ckpt.format_version) + " (expected " +
           std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint32_t count = r.get<std::uint32_t>();
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.get_string();
    if (!seen.insert(t.name).second) r.fail("duplicate tensor '" + t.name + "'");
    t.value = r.get_tensor();
    ckpt.tensors.push_back(std::move(t));
  }

  std::set<std::string> chunks;
  for (;;) {
    char tag_raw[4];
    for (char& c : tag_raw) c = static_cast<char>(r.get<std::uint8_t>());
    const std::string tag(tag_raw, 4);
    const std::uint64_t len = r.get<std::uint64_t>();
    if (len > r.remaining()) r.fail("chunk " + tag + " runs past the end of the file");
    if (!chunks.insert(tag).second) r.fail("duplicate chunk " + tag);
    ByteReader body = r.sub(static_cast<std::size_t>(len));
    if (tag == "END!") break;
    if (tag == "META") {
      std::string text(body.remaining(), '\0');
      for (char& c : text) c = static_cast<char>(body.get<std::uint8_t>());
      std::istringstream in(text);
      std::string line;
      while (std::getline(in, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) r.fail("META line without '='");
        ckpt.meta[line.substr(0, eq)] = line.substr(eq + 1);
      }
    } else if (tag == "BNST") {
      const std::uint32_t n = body.get<std::uint32_t>();
      for (std::uint32_t i = 0; i < n; ++i) {
        std::string name = body.get_string();
        ckpt.bn_updates[name] = body.get<std::int64_t>();
      }
    } else if (tag == "OPTM") {
      const std::uint32_t kind = body.get<std::uint32_t>();
      if (kind > static_cast<std::uint32_t>(Optimizer::Adam)) body.fail("unknown optimizer kind");
      ckpt.optimizer.kind = static_cast<Optimizer>(kind);
      ckpt.optimizer.t = body.get<std::int64_t>();
      const std::uint32_t nm = body.get<std::uint32_t>();
      for (std::uint32_t i = 0; i < nm; ++i) ckpt.optimizer.m.push_back(body.get_tensor());
      const std::uint32_t nv = body.get<std::uint32_t>();
      for (std::uint32_t i = 0; i < nv; ++i) ckpt.optimizer.v.push_back(body.get_tensor());
    } else if (tag == "STEP") {
      ckpt.step = body.get<std::int64_t>();
      const std::uint64_t n = body.get<std::uint64_t>();
      if (n > body.remaining() / sizeof(double)) body.fail("history runs past the end of the chunk");
      ckpt.history.resize(static_cast<std::size_t>(n));
      for (double& h : ckpt.history) h = body.get<double>();
    } else if (tag == "RNGS") {
      ckpt.rng_state.resize(body.remaining());
      for (char& c : ckpt.rng_state) c = static_cast<char>(body.get<std::uint8_t>());
    } else {
      r.fail("unknown chunk tag '" + tag + "'");
    }
    if (body.remaining() != 0) r.fail("chunk " + tag + " has trailing bytes");
  }
  if (r.remaining() != 0) r.fail("trailing bytes after END! chunk");
  for (const char* required : {"META", "BNST", "OPTM", "STEP", "RNGS"}) {
    if (!chunks.count(required)) r.fail(std::string("missing chunk ") + required);
  }
  return ckpt;
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(path.string() + ": cannot open");
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes, path.string());
}

std::vector<NamedTensor> collect_tensors(const NetworkGraph& net) {
  std::vector<NamedTensor> out;
  for (const auto& node : net.nodes()) {
    for (const auto& p : node.params) out.push_back({node.name + "." + p.name, p.value});
    if (node.kind == OpKind::BatchNorm2d) {
      out.push_back({node.name + ".running_mean", node.bn.running_mean});
      out.push_back({node.name + ".running_var", node.bn.running_var});
    }
  }
  return out;
}

void apply_tensors(NetworkGraph& net, const Checkpoint& ckpt) {
  const auto expected = collect_tensors(net);
  std::map<std::string, const Tensor*> stored;
  for (const auto& t : ckpt.tensors) stored[t.name] = &t.value;

  std::string diff;
  std::set<std::string> known;
  for (const auto& e : expected) {
    known.insert(e.name);
    auto it = stored.find(e.name);
    if (it == stored.end()) {
      diff += "\n  missing " + e.name + " " + shape_str(e.value.shape());
    } else if (it->second->shape() != e.value.shape()) {
      diff += "\n  " + e.name + ": checkpoint " + shape_str(it->second->shape()) + ", network " +
              shape_str(e.value.shape());
    }
  }
  for (const auto& t : ckpt.tensors)
    if (!known.count(t.name)) diff += "\n  unexpected " + t.name + " " + shape_str(t.value.shape());
  for (const auto& node : net.nodes()) {
    if (node.kind == OpKind::BatchNorm2d && !ckpt.bn_updates.count(node.name))
      diff += "\n  missing update count for " + node.name;
  }
  if (!diff.empty()) throw DimensionError("checkpoint does not match the network:" + diff);

  for (auto& node : net.nodes()) {
    for (auto& p : node.params) p.value = *stored.at(node.name + "." + p.name);
    if (node.kind == OpKind::BatchNorm2d) {
      node.bn.running_mean = *stored.at(node.name + ".running_mean");
      node.bn.running_var = *stored.at(node.name + ".running_var");
      node.bn.updates = ckpt.bn_updates.at(node.name);
    }
  }
}

std::map<std::string, std::string> describe(nets::Task task, const nets::NetConfig& cfg) {
  std::string rates;
  for (std::size_t i = 0; i < cfg.aspp_rates.size(); ++i)
    rates += (i ? "," : "") + std::to_string(cfg.aspp_rates[i]);
  return {
      {"task", nets::task_name(task)},
      {"net.input_size", std::to_string(cfg.input_size)},
      {"net.base_channels", std::to_string(cfg.base_channels)},
      {"net.depth_scale", format_double(cfg.depth_scale)},
      {"net.num_classes", std::to_string(cfg.num_classes)},
      {"net.aspp_rates", rates},
      {"net.aspp_image_pool", cfg.aspp_image_pool ? "1" : "0"},
      {"net.mixing", nets::mixing_name(cfg.mixing)},
      {"net.seed", std::to_string(cfg.seed)},
  };
}

namespace {

const std::string& meta_value(const std::map<std::string, std::string>& meta, const std::string& key) {
  auto it = meta.find(key);
  if (it == meta.end()) throw ParseError("checkpoint metadata lacks '" + key + "'");
  return it->second;
}

long long meta_int(const std::map<std::string, std::string>& meta, const std::string& key) {
  const std::string& v = meta_value(meta, key);
  try {
    std::size_t used = 0;
    const long long x = std::stoll(v, &used);
    if (used == v.size()) return x;
  } catch (const std::exception&) {
  }
  throw ParseError("checkpoint metadata '" + key + "' is not an integer: '" + v + "'");
}

}  // namespace

nets::Task task_from(const std::map<std::string, std::string>& meta) {
  return nets::parse_task(meta_value(meta, "task"));
}

nets::NetConfig net_config_from(const std::map<std::string, std::string>& meta) {
  nets::NetConfig cfg;
  cfg.input_size = static_cast<int>(meta_int(meta, "net.input_size"));
  cfg.base_channels = static_cast<int>(meta_int(meta, "net.base_channels"));
  cfg.num_classes = static_cast<int>(meta_int(meta, "net.num_classes"));
  cfg.aspp_image_pool = meta_int(meta, "net.aspp_image_pool") != 0;
  cfg.seed = static_cast<std::uint64_t>(meta_int(meta, "net.seed"));
  const std::string& ds = meta_value(meta, "net.depth_scale");
  try {
    cfg.depth_scale = std::stod(ds);
  } catch (const std::exception&) {
    throw ParseError("checkpoint metadata 'net.depth_scale' is not a number: '" + ds + "'");
  }
  cfg.aspp_rates.clear();
  std::istringstream rates(meta_value(meta, "net.aspp_rates"));
  for (std::string tok; std::getline(rates, tok, ',');) {
    try {
      cfg.aspp_rates.push_back(std::stoi(tok));
    } catch (const std::exception&) {
      throw ParseError("checkpoint metadata 'net.aspp_rates' is malformed");
    }
  }
  cfg.mixing = nets::parse_mixing(meta_value(meta, "net.mixing"));
  cfg.validate();
  return cfg;
}

NetworkGraph load_network(const Checkpoint& ckpt) {
  NetworkGraph net = nets::build_for_task(task_from(ckpt.meta), net_config_from(ckpt.meta));
  apply_tensors(net, ckpt);
  return net;
}

}  // namespace fundus::train
