#include "shno/container.hpp"

#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <unistd.h>

namespace shno::io {

namespace {

constexpr char kMagic[4] = {'S', 'H', 'N', 'C'};
constexpr std::size_t kHeader = 4 + 4 + 8;

template <class T>
void put_le(std::vector<std::uint8_t>& out, T v) {
  static_assert(std::is_unsigned_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <class T>
T get_le(const std::uint8_t* p) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(p[i]) << (8 * i);
  return v;
}

template <class U, class F>
void encode(std::vector<std::uint8_t>& out, std::span<const F> v) {
  out.reserve(out.size() + v.size() * sizeof(F));
  for (F x : v) put_le(out, std::bit_cast<U>(x));
}

template <class U, class F>
std::vector<F> decode(const std::vector<std::uint8_t>& b) {
  std::vector<F> out(b.size() / sizeof(F));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::bit_cast<F>(get_le<U>(b.data() + i * sizeof(F)));
  return out;
}

std::uint64_t product(const std::vector<std::uint64_t>& s) {
  std::uint64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

template <class T>
void require_finite(const std::string& name, std::span<const T> v) {
  for (const T& x : v)
    if (!std::isfinite(x)) throw std::invalid_argument("section '" + name + "': nonfinite data");
}

void check_count(const std::string& name, const std::vector<std::uint64_t>& shape, std::size_t n) {
  if (product(shape) != n)
    throw std::invalid_argument("section '" + name + "': shape holds " + std::to_string(product(shape)) +
                                " elements, data " + std::to_string(n));
}

std::uint32_t crc_of(std::span<const std::uint8_t> b) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large payloads in pieces
  for (std::size_t off = 0; off < b.size();) {
    const std::size_t n = std::min<std::size_t>(b.size() - off, 1u << 30);
    crc = crc32(crc, b.data() + off, static_cast<uInt>(n));
    off += n;
  }
  return static_cast<std::uint32_t>(crc);
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
  template <class T>
  T get() {
    need(sizeof(T));
    T v = get_le<T>(b_.data() + pos_);
    pos_ += sizeof(T);
    return v;
  }
  std::span<const std::uint8_t> take(std::uint64_t n) {
    need(n);
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::uint64_t n) const {
    if (n > b_.size() - pos_)
      throw FormatError("section data overruns the payload at byte " + std::to_string(pos_));
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::c128: return 16;
    case DType::utf8: return 1;
  }
  throw UnknownDtype("unknown dtype tag " + std::to_string(static_cast<int>(t)));
}

std::string dtype_name(DType t) {
  switch (t) {
    case DType::f32: return "f32";
    case DType::f64: return "f64";
    case DType::c128: return "c128";
    case DType::utf8: return "utf8";
  }
  return "dtype" + std::to_string(static_cast<int>(t));
}

Section Section::f64(std::string name, std::vector<std::uint64_t> shape, std::span<const double> v) {
  check_count(name, shape, v.size());
  require_finite(name, v);
  Section s{std::move(name), DType::f64, std::move(shape), {}};
  encode<std::uint64_t>(s.bytes, v);
  return s;
}

Section Section::f32(std::string name, std::vector<std::uint64_t> shape, std::span<const float> v) {
  check_count(name, shape, v.size());
  require_finite(name, v);
  Section s{std::move(name), DType::f32, std::move(shape), {}};
  encode<std::uint32_t>(s.bytes, v);
  return s;
}

Section Section::c128(std::string name, std::vector<std::uint64_t> shape, std::span<const std::complex<double>> v) {
  check_count(name, shape, v.size());
  for (const auto& z : v)
    if (!std::isfinite(z.real()) || !std::isfinite(z.imag()))
      throw std::invalid_argument("section '" + name + "': nonfinite data");
  Section s{std::move(name), DType::c128, std::move(shape), {}};
  const std::span<const double> flat(reinterpret_cast<const double*>(v.data()), 2 * v.size());
  encode<std::uint64_t>(s.bytes, flat);
  return s;
}

Section Section::text(std::string name, const std::string& str) {
  Section s{std::move(name), DType::utf8, {str.size()}, {}};
  s.bytes.assign(str.begin(), str.end());
  return s;
}

std::uint64_t Section::numel() const { return product(shape); }

namespace {
void expect(const Section& s, DType t) {
  if (s.dtype != t)
    throw FormatError("section '" + s.name + "' holds " + dtype_name(s.dtype) + ", not " + dtype_name(t));
}
}  // namespace

std::vector<double> Section::as_f64() const {
  expect(*this, DType::f64);
  return decode<std::uint64_t, double>(bytes);
}

std::vector<float> Section::as_f32() const {
  expect(*this, DType::f32);
  return decode<std::uint32_t, float>(bytes);
}

std::vector<std::complex<double>> Section::as_c128() const {
  expect(*this, DType::c128);
  const auto flat = decode<std::uint64_t, double>(bytes);
  std::vector<std::complex<double>> out(flat.size() / 2);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = {flat[2 * i], flat[2 * i + 1]};
  return out;
}

std::string Section::as_text() const {
  expect(*this, DType::utf8);
  return {bytes.begin(), bytes.end()};
}

void Container::add(Section s) {
  if (find(s.name)) throw FormatError("duplicate section '" + s.name + "'");
  if (s.bytes.size() != s.numel() * dtype_size(s.dtype))
    throw FormatError("section '" + s.name + "': " + std::to_string(s.bytes.size()) + " bytes for shape of " +
                      std::to_string(s.numel()) + " " + dtype_name(s.dtype));
  sections_.push_back(std::move(s));
}

const Section* Container::find(const std::string& name) const {
  for (const auto& s : sections_)
    if (s.name == name) return &s;
  return nullptr;
}

const Section& Container::get(const std::string& name) const {
  if (const Section* s = find(name)) return *s;
  throw FormatError("missing section '" + name + "'");
}

std::vector<std::uint8_t> serialize(const Container& c) {
  std::vector<std::uint8_t> payload;
  put_le(payload, static_cast<std::uint32_t>(c.sections().size()));
  for (const auto& s : c.sections()) {
    put_le(payload, static_cast<std::uint32_t>(s.name.size()));
    payload.insert(payload.end(), s.name.begin(), s.name.end());
    payload.push_back(static_cast<std::uint8_t>(s.dtype));
    put_le(payload, static_cast<std::uint32_t>(s.shape.size()));
    for (auto d : s.shape) put_le(payload, d);
    payload.insert(payload.end(), s.bytes.begin(), s.bytes.end());
  }
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put_le(out, kContainerVersion);
  put_le(out, static_cast<std::uint64_t>(payload.size()));
  out.insert(out.end(), payload.begin(), payload.end());
  put_le(out, crc_of(payload));
  return out;
}

namespace {

// Checks the frame and walks the payload; sections not accepted by `keep`
// are skipped without copying their data.
template <class Keep>
Container parse(std::span<const std::uint8_t> file, Keep keep) {
  if (file.size() < 4) throw TruncatedFile("file of " + std::to_string(file.size()) + " bytes has no header");
  if (std::memcmp(file.data(), kMagic, 4) != 0) throw BadMagic("not an SHNC container (bad magic)");
  if (file.size() < kHeader) throw TruncatedFile("header cut short");
  const auto version = get_le<std::uint32_t>(file.data() + 4);
  if (version != kContainerVersion) throw FormatError("unsupported container version " + std::to_string(version));
  const auto length = get_le<std::uint64_t>(file.data() + 8);
  if (length > file.size() - kHeader || file.size() - kHeader - length < 4)
    throw TruncatedFile("payload of " + std::to_string(length) + " bytes plus checksum exceeds the " +
                        std::to_string(file.size() - kHeader) + " bytes after the header");
  if (file.size() - kHeader - length > 4) throw FormatError("trailing bytes after the checksum");
  const auto payload = file.subspan(kHeader, length);
  const auto stored = get_le<std::uint32_t>(file.data() + kHeader + length);
  if (stored != crc_of(payload)) throw CrcMismatch("payload checksum mismatch");

  Reader r(payload);
  Container c;
  std::set<std::string> names;
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t k = 0; k < count; ++k) {
    Section s;
    const auto name = r.take(r.get<std::uint32_t>());
    s.name.assign(name.begin(), name.end());
    const auto tag = r.get<std::uint8_t>();
    if (tag < 1 || tag > 4) throw UnknownDtype("section '" + s.name + "': unknown dtype tag " + std::to_string(tag));
    s.dtype = static_cast<DType>(tag);
    const auto rank = r.get<std::uint32_t>();
    for (std::uint32_t d = 0; d < rank; ++d) s.shape.push_back(r.get<std::uint64_t>());
    const auto data = r.take(s.numel() * dtype_size(s.dtype));
    if (!names.insert(s.name).second) throw FormatError("duplicate section '" + s.name + "'");
    if (!keep(s.name)) continue;
    s.bytes.assign(data.begin(), data.end());
    c.add(std::move(s));
  }
  if (!r.done()) throw FormatError("payload has bytes past the last section");
  return c;
}

}  // namespace

Container deserialize(std::span<const std::uint8_t> file) {
  return parse(file, [](const std::string&) { return true; });
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp" + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + tmp.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      std::filesystem::remove(tmp);
      throw IoError("write to '" + tmp.string() + "' failed");
    }
  }
  std::filesystem::rename(tmp, path);
}

void write_container(const std::filesystem::path& path, const Container& c) {
  write_file_atomic(path, serialize(c));
}

Container read_container(const std::filesystem::path& path) { return deserialize(read_file(path)); }

Section read_section(const std::filesystem::path& path, const std::string& name) {
  const Container c = parse(read_file(path), [&name](const std::string& n) { return n == name; });
  return c.get(name);
}

}  // namespace shno::io
