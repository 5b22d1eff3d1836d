#pragma once

#include <complex>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

// The SHNC container: a little-endian file of named, typed n-d sections.
//
//   "SHNC" | u32 version | u64 payload bytes | payload | u32 CRC-32 of payload
//   payload  = u32 section count, then per section:
//              u32 name bytes | UTF-8 name | u8 dtype | u32 rank | u64 dims[rank] | data
//
// dtype 1 = f32, 2 = f64, 3 = c128 (re, im f64 pairs), 4 = UTF-8 text
// (rank 1, dim = byte count).
namespace shno::io {

inline constexpr std::uint32_t kContainerVersion = 1;

enum class DType : std::uint8_t { f32 = 1, f64 = 2, c128 = 3, utf8 = 4 };

std::size_t dtype_size(DType t);
std::string dtype_name(DType t);

/// A file that cannot be opened, read or written.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ContainerError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct BadMagic : ContainerError {
  using ContainerError::ContainerError;
};
struct CrcMismatch : ContainerError {
  using ContainerError::ContainerError;
};
struct TruncatedFile : ContainerError {
  using ContainerError::ContainerError;
};
struct UnknownDtype : ContainerError {
  using ContainerError::ContainerError;
};
/// Wrong version, inconsistent sizes, duplicate names, missing sections.
struct FormatError : ContainerError {
  using ContainerError::ContainerError;
};

struct Section {
  std::string name;
  DType dtype = DType::f64;
  std::vector<std::uint64_t> shape;
  std::vector<std::uint8_t> bytes;  // little-endian element data

  static Section f64(std::string name, std::vector<std::uint64_t> shape, std::span<const double> v);
  static Section f32(std::string name, std::vector<std::uint64_t> shape, std::span<const float> v);
  static Section c128(std::string name, std::vector<std::uint64_t> shape, std::span<const std::complex<double>> v);
  static Section text(std::string name, const std::string& s);

  std::uint64_t numel() const;
  std::vector<double> as_f64() const;
  std::vector<float> as_f32() const;
  std::vector<std::complex<double>> as_c128() const;
  std::string as_text() const;
};

class Container {
 public:
  /// Throws FormatError on a duplicate name.
  void add(Section s);
  const Section* find(const std::string& name) const;
  /// Throws FormatError naming the missing section.
  const Section& get(const std::string& name) const;
  const std::vector<Section>& sections() const { return sections_; }
  bool empty() const { return sections_.empty(); }

 private:
  std::vector<Section> sections_;
};

std::vector<std::uint8_t> serialize(const Container& c);
Container deserialize(std::span<const std::uint8_t> file);

/// Atomic: writes a sibling temporary file and renames it into place.
void write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path);
/// Verifies the whole file but decodes only the named section.
Section read_section(const std::filesystem::path& path, const std::string& name);

/// Writes bytes to path atomically (temporary sibling + rename).
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace shno::io
