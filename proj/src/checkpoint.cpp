#include "bilevel/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

namespace bilevel::cli {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint encoding assumes a little-endian host");

class Writer {
 public:
  template <class T>
  void put(T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out_.append(buf, sizeof(T));
  }
  void put_bytes(const std::string& s) { out_ += s; }

  void array(const std::string& name, const ad::Tensor& t) {
    put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    put_bytes(name);
    put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put<std::uint64_t>(d);
    for (double v : t.data()) put<double>(v);
  }
  void params(const std::string& prefix, const ParameterSet& p) {
    for (std::size_t i = 0; i < p.size(); ++i) array(prefix + "/" + p.name(i), p[i]);
  }
  void counter(const std::string& name, std::uint64_t v) { array(name, ad::Tensor({1}, static_cast<double>(v))); }

  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_bytes(std::uint64_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

  // Next array, which must be called name with the given shape.
  ad::Tensor array(const std::string& name, const ad::Shape& shape) {
    const std::string got = get_bytes(get<std::uint32_t>());
    if (got != name) throw CheckpointError("checkpoint: expected array '" + name + "', found '" + got + "'");
    const std::uint32_t rank = get<std::uint32_t>();
    if (rank > 8) throw CheckpointError("checkpoint: array '" + name + "' has rank " + std::to_string(rank));
    ad::Shape dims(rank);
    std::uint64_t count = 1;
    for (auto& d : dims) {
      const std::uint64_t v = get<std::uint64_t>();
      if (v != 0 && count > remaining() / sizeof(double) / v)
        throw CheckpointError("checkpoint: array '" + name + "' is larger than the file");
      count *= v;
      d = static_cast<std::size_t>(v);
    }
    if (dims != shape)
      throw CheckpointError("checkpoint: array '" + name + "' has shape " + ad::shape_str(dims) + ", expected " +
                            ad::shape_str(shape));
    need(count * sizeof(double));
    std::vector<double> values(count);
    std::memcpy(values.data(), bytes_.data() + pos_, count * sizeof(double));
    pos_ += count * sizeof(double);
    return ad::Tensor(dims, std::move(values));
  }
  void params(const std::string& prefix, ParameterSet& p) {
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = array(prefix + "/" + p.name(i), p[i].shape());
  }
  std::uint64_t counter(const std::string& name) {
    const double v = array(name, {1})[0];
    if (!(v >= 0 && v <= 9007199254740992.0) || v != static_cast<double>(static_cast<std::uint64_t>(v)))
      throw CheckpointError("checkpoint: counter '" + name + "' is not a non-negative integer");
    return static_cast<std::uint64_t>(v);
  }

 private:
  std::uint64_t remaining() const { return bytes_.size() - pos_; }
  void need(std::uint64_t n) const {
    if (n > remaining()) throw CheckpointError("checkpoint: truncated");
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

struct AdamSlot {
  const char* name;
  optim::AdamState train::BiLevelState::*member;
};

constexpr AdamSlot kAdamSlots[] = {{"pre_g", &train::BiLevelState::pre_g},
                                   {"pre_d", &train::BiLevelState::pre_d},
                                   {"meta_g", &train::BiLevelState::meta_g},
                                   {"meta_d", &train::BiLevelState::meta_d}};

}  // namespace

std::string encode_checkpoint(const ExperimentConfig& config, const train::BiLevelState& state) {
  if (!(state.config == config.train) || state.seed != config.seed)
    throw std::invalid_argument("checkpoint: state was not built from this config");
  Writer w;
  w.put_bytes(std::string(kCheckpointMagic, sizeof kCheckpointMagic));
  w.put<std::uint32_t>(kCheckpointVersion);
  const std::string text = serialize_config(config);
  w.put<std::uint64_t>(text.size());
  w.put_bytes(text);
  w.params("G", state.gp.g);
  w.params("D", state.gp.d);
  w.params("phi", state.phi.params());
  for (const auto& slot : kAdamSlots) {
    const optim::AdamState& a = state.*slot.member;
    w.params(std::string(slot.name) + "/m", a.m);
    w.params(std::string(slot.name) + "/v", a.v);
  }
  for (const auto& slot : kAdamSlots) w.counter(std::string("t/") + slot.name, (state.*slot.member).t);
  w.counter("step/pretrain", state.pretrain_step);
  w.counter("step/metatrain", state.metatrain_step);
  return w.take();
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  if (r.get_bytes(sizeof kCheckpointMagic) != std::string(kCheckpointMagic, sizeof kCheckpointMagic))
    throw CheckpointError("checkpoint: bad magic");
  if (const auto v = r.get<std::uint32_t>(); v != kCheckpointVersion)
    throw CheckpointError("checkpoint: unsupported version " + std::to_string(v));
  const auto text_len = r.get<std::uint64_t>();
  Checkpoint ck;
  try {
    ck.config = parse_config(r.get_bytes(text_len)).config;
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint: embedded ") + e.what());
  }
  // A fresh state supplies every array's name and shape.
  ck.state = train::init_state(ck.config.train, ck.config.seed);
  train::BiLevelState& s = ck.state;
  r.params("G", s.gp.g);
  r.params("D", s.gp.d);
  ParameterSet phi = s.phi.params();
  r.params("phi", phi);
  s.phi = losses::FeatureExtractor(s.phi.seed(), std::move(phi));
  for (const auto& slot : kAdamSlots) {
    optim::AdamState& a = s.*slot.member;
    r.params(std::string(slot.name) + "/m", a.m);
    r.params(std::string(slot.name) + "/v", a.v);
  }
  for (const auto& slot : kAdamSlots) (s.*slot.member).t = r.counter(std::string("t/") + slot.name);
  s.pretrain_step = r.counter("step/pretrain");
  s.metatrain_step = r.counter("step/metatrain");
  if (!r.done()) throw CheckpointError("checkpoint: trailing bytes");
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const ExperimentConfig& config,
                     const train::BiLevelState& state) {
  const std::string bytes = encode_checkpoint(config, state);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("checkpoint: cannot write " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot read " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace bilevel::cli
