#include "dpq/codebook_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

namespace dpq {

namespace {

class ByteWriter {
public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  void bytes(const char* p, std::size_t n) { buf_.insert(buf_.end(), p, p + n); }
  void matrix(const Matrix& m) {
    u64(static_cast<std::uint64_t>(m.rows()));
    u64(static_cast<std::uint64_t>(m.cols()));
    for (Index r = 0; r < m.rows(); ++r)
      for (Index c = 0; c < m.cols(); ++c) f64(m(r, c));
  }
  std::vector<std::uint8_t>& buffer() { return buf_; }

private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
public:
  explicit ByteReader(std::span<const std::uint8_t> b) : b_(b) {}
  std::uint8_t u8() { return static_cast<std::uint8_t>(le(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  Matrix matrix() {
    const std::uint64_t rows = u64();
    const std::uint64_t cols = u64();
    if (cols != 0 && rows > remaining() / 8 / cols) throw CorruptFile("matrix dimensions exceed the file size");
    Matrix m(static_cast<Index>(rows), static_cast<Index>(cols));
    for (Index r = 0; r < m.rows(); ++r)
      for (Index c = 0; c < m.cols(); ++c) m(r, c) = f64();
    return m;
  }
  std::size_t remaining() const { return b_.size() - pos_; }

private:
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw CorruptFile("unexpected end of data");
  }
  std::uint64_t le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(b_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto n = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
    crc = crc32(crc, bytes.data() + off, n);
    off += n;
  }
  return static_cast<std::uint32_t>(crc);
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& key, const std::string& s) {
  double v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw InvalidArgument("config key '" + key + "': '" + s + "' is not a number");
  return v;
}

Index parse_index(const std::string& key, const std::string& s) {
  long long v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw InvalidArgument("config key '" + key + "': '" + s + "' is not an integer");
  return static_cast<Index>(v);
}

bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw InvalidArgument("config key '" + key + "': '" + s + "' is not a boolean");
}

const char* format_bool(bool b) { return b ? "true" : "false"; }

}  // namespace

std::size_t packed_code_bytes(Index rows, Index groups, Index num_codes) {
  const auto bits = static_cast<std::uint64_t>(rows) * static_cast<std::uint64_t>(groups) *
                    static_cast<std::uint64_t>(code_bits(num_codes));
  return static_cast<std::size_t>((bits + 7) / 8);
}

std::vector<std::uint8_t> pack_codes(const Codebook& codes) {
  codes.validate();
  const int b = code_bits(codes.num_codes);
  std::vector<std::uint8_t> out(packed_code_bytes(codes.rows(), codes.groups(), codes.num_codes), 0);
  std::uint64_t bit = 0;
  for (Index i = 0; i < codes.rows(); ++i)
    for (Index j = 0; j < codes.groups(); ++j) {
      const auto c = static_cast<std::uint32_t>(codes.codes(i, j));
      for (int t = 0; t < b; ++t, ++bit)
        if ((c >> t) & 1u) out[bit / 8] |= static_cast<std::uint8_t>(1u << (bit % 8));
    }
  return out;
}

Codebook unpack_codes(std::span<const std::uint8_t> bytes, Index rows, Index groups, Index num_codes) {
  if (rows < 0 || groups < 1 || num_codes < 2) throw CorruptFile("unpack_codes: invalid shape");
  if (bytes.size() != packed_code_bytes(rows, groups, num_codes))
    throw CorruptFile("unpack_codes: expected " + std::to_string(packed_code_bytes(rows, groups, num_codes)) +
                      " bytes, got " + std::to_string(bytes.size()));
  const int b = code_bits(num_codes);
  Codebook cb{CodeMatrix(rows, groups), num_codes};
  std::uint64_t bit = 0;
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < groups; ++j) {
      std::uint32_t c = 0;
      for (int t = 0; t < b; ++t, ++bit) c |= static_cast<std::uint32_t>((bytes[bit / 8] >> (bit % 8)) & 1u) << t;
      if (c >= static_cast<std::uint32_t>(num_codes)) throw CorruptFile("unpack_codes: decoded code exceeds K");
      cb.codes(i, j) = static_cast<std::int32_t>(c);
    }
  return cb;
}

PayloadSize payload_size(Index rows, Index dim, Index num_codes, Index groups, bool shared) {
  PayloadSize p;
  p.code_bytes = packed_code_bytes(rows, groups, num_codes);
  const auto width = static_cast<std::uint64_t>(shared ? dim / groups : dim);
  p.value_bytes = 4 * static_cast<std::uint64_t>(num_codes) * width;
  return p;
}

CompressedArtifact make_artifact(const QuantizerState& state, const DpqConfig& cfg) {
  CompressedArtifact a;
  a.codes = discretize_all(state, cfg);
  Matrix v = state.values().data().cast<float>().cast<double>();
  a.values = ProductTable(std::move(v), cfg.num_groups, cfg.subspace_sharing);
  a.tied = state.tied();
  return a;
}

std::vector<std::uint8_t> serialize_artifact(const CompressedArtifact& a) {
  if (a.codes.groups() != a.values.groups() || a.codes.num_codes != a.values.rows())
    throw InvalidArgument("serialize_artifact: codebook and value shapes disagree");
  if (a.num_codes() > 0xFFFFFFFFLL || a.dim() > 0xFFFFFFFFLL || a.num_groups() > 0xFFFFFFFFLL)
    throw InvalidArgument("serialize_artifact: dimension exceeds 32 bits");

  ByteWriter payload;
  payload.bytes(pack_codes(a.codes));
  const Matrix& v = a.values.data();
  for (Index r = 0; r < v.rows(); ++r)
    for (Index c = 0; c < v.cols(); ++c) payload.f32(static_cast<float>(v(r, c)));

  ByteWriter w;
  w.bytes(kArtifactMagic, sizeof kArtifactMagic);
  w.u16(kArtifactVersion);
  w.u16(static_cast<std::uint16_t>((a.shared() ? kFlagShared : 0) | (a.tied ? kFlagTied : 0)));
  w.u64(static_cast<std::uint64_t>(a.vocab_size()));
  w.u32(static_cast<std::uint32_t>(a.dim()));
  w.u32(static_cast<std::uint32_t>(a.num_codes()));
  w.u32(static_cast<std::uint32_t>(a.num_groups()));
  w.bytes(payload.buffer());
  w.u32(crc32_of(payload.buffer()));
  return std::move(w.buffer());
}

CompressedArtifact parse_artifact(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (bytes.size() < sizeof kArtifactMagic || !std::equal(kArtifactMagic, kArtifactMagic + 8, bytes.begin()))
    throw UnsupportedFile("not a DPQ codebook artifact (bad magic)");
  r.take(8);
  const std::uint16_t version = r.u16();
  if (version != kArtifactVersion) throw UnsupportedFile("unsupported artifact version " + std::to_string(version));
  const std::uint16_t flags = r.u16();
  if (flags & ~(kFlagShared | kFlagTied)) throw UnsupportedFile("unknown artifact flags");
  const std::uint64_t n = r.u64();
  const std::uint32_t d = r.u32();
  const std::uint32_t k = r.u32();
  const std::uint32_t groups = r.u32();
  if (k < 2 || groups < 1 || d < 1 || d % groups != 0) throw CorruptFile("artifact header has inconsistent shape");
  const bool shared = flags & kFlagShared;

  if (n > bytes.size() * 8) throw CorruptFile("artifact size does not match its header");
  const PayloadSize ps = payload_size(static_cast<Index>(n), d, k, groups, shared);
  if (r.remaining() != ps.code_bytes + ps.value_bytes + 4)
    throw CorruptFile("artifact size does not match its header");
  const auto payload = bytes.subspan(kArtifactHeaderBytes, ps.code_bytes + ps.value_bytes);
  const auto code_span = r.take(ps.code_bytes);
  const Index width = shared ? d / groups : d;
  Matrix v(k, width);
  for (Index row = 0; row < v.rows(); ++row)
    for (Index c = 0; c < v.cols(); ++c) v(row, c) = static_cast<double>(r.f32());
  if (r.u32() != crc32_of(payload)) throw CorruptFile("artifact checksum mismatch");

  CompressedArtifact a;
  a.codes = unpack_codes(code_span, static_cast<Index>(n), groups, k);
  if (!all_finite(v)) throw CorruptFile("artifact value table holds non-finite entries");
  a.values = ProductTable(std::move(v), groups, shared);
  a.tied = flags & kFlagTied;
  return a;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CorruptFile("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InvalidArgument("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InvalidArgument("write failed for " + path.string());
}

void save_artifact(const CompressedArtifact& artifact, const std::filesystem::path& path) {
  write_file(path, serialize_artifact(artifact));
}

CompressedArtifact load_artifact(const std::filesystem::path& path) { return parse_artifact(read_file(path)); }

KeyValues read_key_values(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open config " + path.string());
  KeyValues kv;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos || eq == 0)
      throw InvalidArgument(path.string() + ":" + std::to_string(lineno) + ": expected key=value");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

std::string format_key_values(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

void write_key_values(const KeyValues& kv, const std::filesystem::path& path) {
  const std::string s = format_key_values(kv);
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

const std::vector<std::string> kConfigKeys = {
    "n",         "d",          "k",        "d-groups",         "mode",   "distance",
    "subspace-sharing", "tau-forward", "tau-backward", "reg-coefficient", "ema-decay",
    "batch-norm", "bn-affine", "bn-momentum", "bn-eps"};

KeyValues config_to_key_values(const DpqConfig& cfg) {
  KeyValues kv;
  kv["n"] = std::to_string(cfg.vocab_size);
  kv["d"] = std::to_string(cfg.dim);
  kv["k"] = std::to_string(cfg.num_codes);
  kv["d-groups"] = std::to_string(cfg.num_groups);
  kv["mode"] = to_string(cfg.mode);
  kv["distance"] = to_string(cfg.distance);
  kv["subspace-sharing"] = format_bool(cfg.subspace_sharing);
  kv["tau-forward"] = format_double(cfg.tau_forward);
  kv["tau-backward"] = format_double(cfg.tau_backward);
  kv["reg-coefficient"] = format_double(cfg.reg_coefficient);
  kv["ema-decay"] = cfg.ema_decay ? format_double(*cfg.ema_decay) : "none";
  kv["batch-norm"] = format_bool(cfg.batch_norm);
  kv["bn-affine"] = format_bool(cfg.bn_affine);
  kv["bn-momentum"] = format_double(cfg.bn_momentum);
  kv["bn-eps"] = format_double(cfg.bn_eps);
  return kv;
}

void apply_config_key_values(DpqConfig& cfg, const KeyValues& kv) {
  for (const auto& [key, v] : kv) {
    if (key == "n") cfg.vocab_size = parse_index(key, v);
    else if (key == "d") cfg.dim = parse_index(key, v);
    else if (key == "k") cfg.num_codes = parse_index(key, v);
    else if (key == "d-groups") cfg.num_groups = parse_index(key, v);
    else if (key == "mode") cfg.mode = parse_mode(v);
    else if (key == "distance") cfg.distance = parse_distance(v);
    else if (key == "subspace-sharing") cfg.subspace_sharing = parse_bool(key, v);
    else if (key == "tau-forward") cfg.tau_forward = parse_double(key, v);
    else if (key == "tau-backward") cfg.tau_backward = parse_double(key, v);
    else if (key == "reg-coefficient") cfg.reg_coefficient = parse_double(key, v);
    else if (key == "ema-decay") {
      if (v == "none" || v.empty()) cfg.ema_decay.reset();
      else cfg.ema_decay = parse_double(key, v);
    } else if (key == "batch-norm") cfg.batch_norm = parse_bool(key, v);
    else if (key == "bn-affine") cfg.bn_affine = parse_bool(key, v);
    else if (key == "bn-momentum") cfg.bn_momentum = parse_double(key, v);
    else if (key == "bn-eps") cfg.bn_eps = parse_double(key, v);
  }
}

namespace {
constexpr char kStateMagic[8] = {'D', 'P', 'Q', 'S', 'T', 'A', 'T', 'E'};

void write_table(ByteWriter& w, const ProductTable& t) {
  w.u32(static_cast<std::uint32_t>(t.groups()));
  w.u8(t.shared() ? 1 : 0);
  w.matrix(t.data());
}

ProductTable read_table(ByteReader& r) {
  const std::uint32_t groups = r.u32();
  const bool shared = r.u8() != 0;
  Matrix m = r.matrix();
  try {
    return ProductTable(std::move(m), groups, shared);
  } catch (const InvalidArgument& e) {
    throw CorruptFile(std::string("training state: ") + e.what());
  }
}
}  // namespace

void save_training_state(const QuantizerState& state, const std::filesystem::path& path) {
  ByteWriter w;
  w.bytes(kStateMagic, sizeof kStateMagic);
  w.u16(1);
  w.matrix(state.queries);
  write_table(w, state.keys);
  w.u8(state.untied_values ? 1 : 0);
  if (state.untied_values) write_table(w, *state.untied_values);
  w.u8(state.norm ? 1 : 0);
  if (state.norm) {
    w.matrix(state.norm->running_mean);
    w.matrix(state.norm->running_var);
    w.matrix(state.norm->gamma);
    w.matrix(state.norm->beta);
    w.u8(state.norm->affine ? 1 : 0);
    w.f64(state.norm->momentum);
    w.f64(state.norm->eps);
  }
  w.u8(state.ema ? 1 : 0);
  if (state.ema) {
    w.matrix(state.ema->counts);
    w.matrix(state.ema->sums);
  }
  w.u32(crc32_of(w.buffer()));
  write_file(path, w.buffer());
}

QuantizerState load_training_state(const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = read_file(path);
  if (bytes.size() < 14 || !std::equal(kStateMagic, kStateMagic + 8, bytes.begin()))
    throw UnsupportedFile("not a DPQ training state file");
  const auto body = std::span<const std::uint8_t>(bytes).first(bytes.size() - 4);
  ByteReader tail{std::span<const std::uint8_t>(bytes).last(4)};
  if (tail.u32() != crc32_of(body)) throw CorruptFile("training state checksum mismatch");
  ByteReader r(body);
  r.take(8);
  if (r.u16() != 1) throw UnsupportedFile("unsupported training state version");
  QuantizerState st;
  st.queries = r.matrix();
  st.keys = read_table(r);
  if (r.u8()) st.untied_values = read_table(r);
  if (r.u8()) {
    DistanceNorm n;
    n.running_mean = r.matrix();
    n.running_var = r.matrix();
    n.gamma = r.matrix();
    n.beta = r.matrix();
    n.affine = r.u8() != 0;
    n.momentum = r.f64();
    n.eps = r.f64();
    st.norm = std::move(n);
  }
  if (r.u8()) {
    EmaState e;
    e.counts = r.matrix();
    e.sums = r.matrix();
    st.ema = std::move(e);
  }
  if (r.remaining() != 0) throw CorruptFile("trailing bytes in training state");
  return st;
}

}  // namespace dpq
