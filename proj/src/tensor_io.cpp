#include "xling/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace xling {

uint64_t fnv1a(const void* data, size_t len, uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

uint64_t fnv1a(const std::string& s, uint64_t h) { return fnv1a(s.data(), s.size(), h); }

std::string to_hex(uint64_t x) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<size_t>(i)] = digits[x & 0xf];
    x >>= 4;
  }
  return out;
}

namespace {

constexpr char kTensorMagic[8] = {'X', 'L', 'N', 'G', 'T', 'E', 'N', 'S'};
constexpr char kCkptMagic[8] = {'X', 'L', 'N', 'G', 'C', 'K', 'P', 'T'};
constexpr uint32_t kTensorVersion = 1;

void put_bytes(std::string& buf, const void* p, size_t n) {
  buf.append(static_cast<const char*>(p), n);
}
void put_u32(std::string& buf, uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  put_bytes(buf, b, 4);
}
void put_u64(std::string& buf, uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  put_bytes(buf, b, 8);
}
void put_i64(std::string& buf, int64_t v) { put_u64(buf, static_cast<uint64_t>(v)); }
void put_f64(std::string& buf, double v) { put_u64(buf, std::bit_cast<uint64_t>(v)); }
void put_str(std::string& buf, const std::string& s) {
  put_u32(buf, static_cast<uint32_t>(s.size()));
  put_bytes(buf, s.data(), s.size());
}

class ByteReader {
 public:
  ByteReader(const std::string& buf, const char* what) : buf_(buf), what_(what) {}

  size_t pos() const { return pos_; }

  const char* take(size_t n) {
    if (pos_ + n > buf_.size()) {
      throw IoError(std::string(what_) + " is truncated");
    }
    const char* p = buf_.data() + pos_;
    pos_ += n;
    return p;
  }
  uint32_t u32() {
    const char* p = take(4);
    uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(p[i]);
    return v;
  }
  uint64_t u64() {
    const char* p = take(8);
    uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(p[i]);
    return v;
  }
  int64_t i64() { return static_cast<int64_t>(u64()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const uint32_t n = u32();
    if (n > (1u << 20)) {
      throw IoError(std::string(what_) + " has an implausible string length");
    }
    return std::string(take(n), n);
  }

 private:
  const std::string& buf_;
  const char* what_;
  size_t pos_ = 0;
};

std::string encode_tensors(const std::map<std::string, Tensor>& tensors) {
  std::string buf;
  put_bytes(buf, kTensorMagic, 8);
  put_u32(buf, kTensorVersion);
  put_u64(buf, tensors.size());
  for (const auto& [name, t] : tensors) {
    put_str(buf, name);
    put_u32(buf, 0);  // dtype 0 = f64
    put_u32(buf, static_cast<uint32_t>(t.ndim()));
    for (int64_t d : t.shape()) put_i64(buf, d);
    for (double v : t.data()) put_f64(buf, v);
  }
  put_u64(buf, fnv1a(buf.data(), buf.size()));
  return buf;
}

std::map<std::string, Tensor> decode_tensors(ByteReader& r) {
  const char* magic = r.take(8);
  if (std::memcmp(magic, kTensorMagic, 8) != 0) {
    throw IoError("tensor container has a bad magic header");
  }
  const uint32_t version = r.u32();
  if (version != kTensorVersion) {
    throw IoError("tensor container format version " + std::to_string(version) +
                  " needs migration (this build reads version " +
                  std::to_string(kTensorVersion) + ")");
  }
  const uint64_t count = r.u64();
  if (count > (1u << 24)) {
    throw IoError("tensor container has an implausible tensor count");
  }
  std::map<std::string, Tensor> out;
  std::string raw_view;  // bytes covered by the trailer
  for (uint64_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const uint32_t dtype = r.u32();
    if (dtype != 0) {
      throw IoError("tensor '" + name + "' has unsupported dtype " + std::to_string(dtype));
    }
    const uint32_t ndim = r.u32();
    if (ndim > 8) {
      throw IoError("tensor '" + name + "' has implausible rank " + std::to_string(ndim));
    }
    Shape shape(ndim);
    int64_t numel = 1;
    for (uint32_t d = 0; d < ndim; ++d) {
      shape[d] = r.i64();
      if (shape[d] <= 0 || shape[d] > (1ll << 32)) {
        throw IoError("tensor '" + name + "' has an invalid dimension");
      }
      numel *= shape[d];
    }
    if (numel > (1ll << 30)) {
      throw IoError("tensor '" + name + "' is implausibly large");
    }
    std::vector<double> data(static_cast<size_t>(numel));
    for (auto& v : data) v = r.f64();
    out.emplace(std::move(name), Tensor::from_data(std::move(shape), std::move(data)));
  }
  // Consume the container trailer; the caller has already verified the
  // whole-buffer integrity hash, which covers these bytes.
  (void)r.u64();
  return out;
}

}  // namespace

void write_tensors(std::ostream& os, const std::map<std::string, Tensor>& tensors) {
  const std::string buf = encode_tensors(tensors);
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!os) throw IoError("failed writing tensor container");
}

std::map<std::string, Tensor> read_tensors(std::istream& is) {
  std::ostringstream ss;
  ss << is.rdbuf();
  const std::string buf = ss.str();
  if (buf.size() < 16) throw IoError("tensor container is truncated");
  const uint64_t stored = [&] {
    uint64_t v = 0;
    for (int i = 7; i >= 0; --i) {
      v = (v << 8) | static_cast<unsigned char>(buf[buf.size() - 8 + static_cast<size_t>(i)]);
    }
    return v;
  }();
  if (fnv1a(buf.data(), buf.size() - 8) != stored) {
    throw IoError("tensor container is corrupted: integrity hash mismatch");
  }
  ByteReader r(buf, "tensor container");
  return decode_tensors(r);
}

void save_tensor_file(const std::string& path, const std::map<std::string, Tensor>& tensors) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  write_tensors(f, tensors);
}

std::map<std::string, Tensor> load_tensor_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "'");
  return read_tensors(f);
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::string buf;
  put_bytes(buf, kCkptMagic, 8);
  put_u32(buf, Checkpoint::kVersion);
  put_str(buf, ckpt.config_digest);
  put_i64(buf, ckpt.step);
  put_u32(buf, static_cast<uint32_t>(ckpt.rng_states.size()));
  for (const auto& [name, st] : ckpt.rng_states) {
    put_str(buf, name);
    for (uint64_t w : st) put_u64(buf, w);
  }
  put_u32(buf, static_cast<uint32_t>(ckpt.counters.size()));
  for (const auto& [name, c] : ckpt.counters) {
    put_str(buf, name);
    put_u64(buf, c);
  }
  put_str(buf, ckpt.bpe_text);
  buf += encode_tensors(ckpt.tensors);
  put_u64(buf, fnv1a(buf.data(), buf.size()));

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw IoError("failed writing checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  const std::string buf = ss.str();
  if (buf.size() < 16) throw IoError("checkpoint is truncated");
  const uint64_t stored = [&] {
    uint64_t v = 0;
    for (int i = 7; i >= 0; --i) {
      v = (v << 8) | static_cast<unsigned char>(buf[buf.size() - 8 + static_cast<size_t>(i)]);
    }
    return v;
  }();
  if (fnv1a(buf.data(), buf.size() - 8) != stored) {
    throw IoError("checkpoint is corrupted: integrity hash mismatch");
  }
  ByteReader r(buf, "checkpoint");
  const char* magic = r.take(8);
  if (std::memcmp(magic, kCkptMagic, 8) != 0) {
    throw IoError("'" + path + "' is not a checkpoint file (bad magic)");
  }
  const uint32_t version = r.u32();
  if (version != Checkpoint::kVersion) {
    throw IoError("checkpoint format version " + std::to_string(version) +
                  " needs migration (this build reads version " +
                  std::to_string(Checkpoint::kVersion) + ")");
  }
  Checkpoint ckpt;
  ckpt.config_digest = r.str();
  ckpt.step = r.i64();
  const uint32_t n_rng = r.u32();
  for (uint32_t i = 0; i < n_rng; ++i) {
    std::string name = r.str();
    std::array<uint64_t, 4> st{};
    for (auto& w : st) w = r.u64();
    ckpt.rng_states.emplace(std::move(name), st);
  }
  const uint32_t n_ctr = r.u32();
  for (uint32_t i = 0; i < n_ctr; ++i) {
    std::string name = r.str();
    ckpt.counters.emplace(std::move(name), r.u64());
  }
  ckpt.bpe_text = r.str();
  ckpt.tensors = decode_tensors(r);
  return ckpt;
}

}  // namespace xling
