#include "pidm/store.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace pidm {
namespace {

constexpr char kMagic[4] = {'P', 'I', 'D', 'M'};

template <class T>
void put_le(std::string& out, T v) {
  static_assert(std::is_integral_v<T>);
  using U = std::make_unsigned_t<T>;
  auto u = static_cast<U>(v);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>(u & 0xffu));
    u = static_cast<U>(u >> 8);
  }
}

void put_f64(std::string& out, double v) { put_le(out, std::bit_cast<std::uint64_t>(v)); }

void put_str(std::string& out, const std::string& s, bool wide) {
  if (wide) {
    put_le<std::uint64_t>(out, s.size());
  } else {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  }
  out += s;
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <class T>
  T get() {
    need(sizeof(T));
    using U = std::make_unsigned_t<T>;
    U u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      u |= static_cast<U>(static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i));
    }
    pos_ += sizeof(T);
    return static_cast<T>(u);
  }

  double f64() { return std::bit_cast<double>(get<std::uint64_t>()); }

  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw StoreError(StoreError::Code::Truncated,
                       "archive truncated at byte " + std::to_string(pos_));
    }
  }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

template <class T>
const T& get_as(const std::map<std::string, Archive::Value>& f, const std::string& name,
                const char* type) {
  auto it = f.find(name);
  if (it == f.end()) throw StoreError(StoreError::Code::MissingField, "missing field '" + name + "'");
  if (!std::holds_alternative<T>(it->second)) {
    throw StoreError(StoreError::Code::WrongType, "field '" + name + "' is not a " + type);
  }
  return std::get<T>(it->second);
}

}  // namespace

const std::string& Archive::get_string(const std::string& name) const {
  return get_as<std::string>(fields_, name, "string");
}

double Archive::get_real(const std::string& name) const {
  return get_as<double>(fields_, name, "real");
}

std::int64_t Archive::get_int(const std::string& name) const {
  return get_as<std::int64_t>(fields_, name, "integer");
}

const Tensor& Archive::get_tensor(const std::string& name) const {
  return get_as<Tensor>(fields_, name, "tensor");
}

std::string Archive::serialize() const {
  std::string out(kMagic, 4);
  put_le<std::uint32_t>(out, kVersion);
  put_str(out, kind_, false);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(fields_.size()));
  for (const auto& [name, value] : fields_) {
    put_str(out, name, false);
    out.push_back(static_cast<char>(value.index()));
    if (const auto* s = std::get_if<std::string>(&value)) {
      put_str(out, *s, true);
    } else if (const auto* d = std::get_if<double>(&value)) {
      put_f64(out, *d);
    } else if (const auto* i = std::get_if<std::int64_t>(&value)) {
      put_le<std::int64_t>(out, *i);
    } else {
      const auto& t = std::get<Tensor>(value);
      put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
      for (auto dim : t.shape()) put_le<std::uint64_t>(out, dim);
      for (double v : t.data()) put_f64(out, v);
    }
  }
  return out;
}

Archive Archive::deserialize(const std::string& bytes) {
  Reader r(bytes);
  if (r.str(4) != std::string(kMagic, 4)) {
    throw StoreError(StoreError::Code::BadMagic, "not a PIDM archive (bad magic)");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) {
    throw StoreError(StoreError::Code::BadVersion,
                     "unsupported archive version " + std::to_string(version));
  }
  Archive a(r.str(r.get<std::uint32_t>()));
  const auto n = r.get<std::uint32_t>();
  for (std::uint32_t f = 0; f < n; ++f) {
    std::string name = r.str(r.get<std::uint32_t>());
    const auto tag = r.get<std::uint8_t>();
    switch (tag) {
      case 0:
        a.set(name, r.str(static_cast<std::size_t>(r.get<std::uint64_t>())));
        break;
      case 1:
        a.set(name, r.f64());
        break;
      case 2:
        a.set(name, r.get<std::int64_t>());
        break;
      case 3: {
        const auto rank = r.get<std::uint32_t>();
        Shape shape(rank);
        std::size_t count = 1;
        for (auto& d : shape) {
          d = static_cast<std::size_t>(r.get<std::uint64_t>());
          if (d != 0 && count > bytes.size() / d) {
            throw StoreError(StoreError::Code::Truncated, "tensor '" + name + "' larger than archive");
          }
          count *= d;
        }
        r.need(count * 8);
        std::vector<double> data(count);
        for (auto& v : data) v = r.f64();
        a.set(name, Tensor(std::move(shape), std::move(data)));
        break;
      }
      default:
        throw StoreError(StoreError::Code::BadTag,
                         "unknown field tag " + std::to_string(tag) + " for '" + name + "'");
    }
  }
  return a;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw StoreError(StoreError::Code::Io, "cannot open " + tmp.string() + " for writing");
    os.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!os) throw StoreError(StoreError::Code::Io, "write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void Archive::save(const std::filesystem::path& path) const { write_file_atomic(path, serialize()); }

Archive Archive::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw StoreError(StoreError::Code::Io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return deserialize(ss.str());
}

Archive Archive::load(const std::filesystem::path& path, const std::string& expected_kind) {
  Archive a = load(path);
  if (a.kind() != expected_kind) {
    throw StoreError(StoreError::Code::WrongKind, path.string() + " holds a '" + a.kind() +
                                                      "' archive, expected '" + expected_kind + "'");
  }
  return a;
}

}  // namespace pidm
