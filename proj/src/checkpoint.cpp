#include "wavg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "wavg/errors.hpp"

namespace wavg {

static_assert(std::endian::native == std::endian::little, "checkpoint codec assumes little-endian");

namespace {

constexpr char kMagic[8] = {'W', 'A', 'V', 'G', 'C', 'K', 'P', 'T'};

class Writer {
 public:
  template <typename T>
  void put(T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out_.append(buf, sizeof(T));
  }
  void put_doubles(std::span<const double> v) {
    put<std::uint64_t>(v.size());
    out_.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
  }
  void put_string(std::string_view s) {
    put<std::uint64_t>(s.size());
    out_.append(s);
  }
  void raw(const char* p, std::size_t n) { out_.append(p, n); }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view in) : in_(in) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, in_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::vector<double> get_doubles() {
    const auto n = get<std::uint64_t>();
    if (n > (in_.size() - pos_) / sizeof(double)) fail();
    std::vector<double> v(n);
    std::memcpy(v.data(), in_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
    return v;
  }
  std::string get_string() {
    const auto n = get<std::uint64_t>();
    need(n);
    std::string s(in_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::string_view raw(std::size_t n) {
    need(n);
    auto s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n) const {
    if (n > in_.size() - pos_) fail();
  }
  [[noreturn]] static void fail() { throw InputError("checkpoint: truncated record"); }

  std::string_view in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.raw(kMagic, sizeof(kMagic));
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint64_t>(ckpt.spec.layer_widths.size());
  for (auto width : ckpt.spec.layer_widths) w.put<std::uint64_t>(width);
  w.put<std::uint64_t>(ckpt.spec.use_batchnorm.size());
  for (bool b : ckpt.spec.use_batchnorm) w.put<std::uint8_t>(b ? 1 : 0);
  w.put<double>(ckpt.spec.bn_momentum);
  w.put<double>(ckpt.spec.bn_epsilon);
  w.put_doubles(ckpt.params.values());
  w.put<std::uint64_t>(ckpt.bn.layers.size());
  for (const auto& layer : ckpt.bn.layers) {
    w.put<std::uint64_t>(layer.layer);
    w.put_doubles(layer.running_mean);
    w.put_doubles(layer.running_var);
  }
  w.put<std::uint64_t>(ckpt.metadata.size());
  for (const auto& [k, v] : ckpt.metadata) {
    w.put_string(k);
    w.put_string(v);
  }
  return w.take();
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  Reader r(bytes);
  if (r.raw(sizeof(kMagic)) != std::string_view(kMagic, sizeof(kMagic))) {
    throw InputError("checkpoint: bad magic");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw InputError("checkpoint: unsupported format version " + std::to_string(version));
  }
  Checkpoint ckpt;
  const auto n_widths = r.get<std::uint64_t>();
  if (n_widths > 1024) throw InputError("checkpoint: implausible layer count");
  for (std::uint64_t i = 0; i < n_widths; ++i) {
    ckpt.spec.layer_widths.push_back(r.get<std::uint64_t>());
  }
  const auto n_flags = r.get<std::uint64_t>();
  if (n_flags > 1024) throw InputError("checkpoint: implausible layer count");
  for (std::uint64_t i = 0; i < n_flags; ++i) ckpt.spec.use_batchnorm.push_back(r.get<std::uint8_t>() != 0);
  ckpt.spec.bn_momentum = r.get<double>();
  ckpt.spec.bn_epsilon = r.get<double>();
  if (!ckpt.spec.layer_widths.empty()) ckpt.spec.n_classes = ckpt.spec.layer_widths.back();

  const Mlp model(ckpt.spec);
  ckpt.params = ParamVector(model.layout(), r.get_doubles());

  ckpt.bn.momentum = ckpt.spec.bn_momentum;
  ckpt.bn.epsilon = ckpt.spec.bn_epsilon;
  const auto n_bn = r.get<std::uint64_t>();
  if (n_bn > n_flags) throw InputError("checkpoint: more BN layers than hidden layers");
  for (std::uint64_t i = 0; i < n_bn; ++i) {
    BnLayerStats layer;
    layer.layer = r.get<std::uint64_t>();
    layer.running_mean = r.get_doubles();
    layer.running_var = r.get_doubles();
    ckpt.bn.layers.push_back(std::move(layer));
  }
  // Validates the BN block against the spec.
  (void)model.predict(ckpt.params, ckpt.bn, Tensor2(0, ckpt.spec.input_width()));

  const auto n_meta = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < n_meta; ++i) {
    auto k = r.get_string();
    ckpt.metadata[std::move(k)] = r.get_string();
  }
  if (!r.done()) throw InputError("checkpoint: trailing bytes");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const std::string bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("checkpoint: cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("checkpoint: write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("checkpoint: cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace wavg
