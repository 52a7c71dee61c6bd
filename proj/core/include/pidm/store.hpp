#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <variant>

#include "pidm/tensor.hpp"

namespace pidm {

/// Binary container shared by corpora, observation sets, reconstructions and
/// model checkpoints.
///
/// Layout (all integers and reals little-endian):
///   "PIDM" | u32 version | u32 len + kind | u32 n_fields |
///   n_fields x ( u32 len + name | u8 tag | payload )
/// Payloads: tag 0 string (u64 len + bytes), tag 1 f64, tag 2 i64,
///           tag 3 tensor (u32 rank, u64 dims[rank], f64 data[numel]).
/// Fields are written in key order, so equal archives serialize to equal bytes.
class Archive {
 public:
  static constexpr std::uint32_t kVersion = 1;

  using Value = std::variant<std::string, double, std::int64_t, Tensor>;

  Archive() = default;
  explicit Archive(std::string kind) : kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

  void set(const std::string& name, Value v) { fields_[name] = std::move(v); }
  bool has(const std::string& name) const { return fields_.count(name) != 0; }

  const std::string& get_string(const std::string& name) const;
  double get_real(const std::string& name) const;
  std::int64_t get_int(const std::string& name) const;
  const Tensor& get_tensor(const std::string& name) const;

  const std::map<std::string, Value>& fields() const noexcept { return fields_; }

  std::string serialize() const;
  static Archive deserialize(const std::string& bytes);

  /// Writes via a temporary file and rename.
  void save(const std::filesystem::path& path) const;
  static Archive load(const std::filesystem::path& path);
  /// load() that also checks the archive kind.
  static Archive load(const std::filesystem::path& path, const std::string& expected_kind);

 private:
  std::string kind_;
  std::map<std::string, Value> fields_;
};

class StoreError : public std::runtime_error {
 public:
  enum class Code { BadMagic, BadVersion, Truncated, BadTag, MissingField, WrongType, WrongKind, Io };

  StoreError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Code code() const noexcept { return code_; }

 private:
  Code code_;
};

/// Replaces `path` atomically with `contents`.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

}  // namespace pidm
