#include "pfeed/io.hpp"

#include <charconv>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "pfeed/errors.hpp"

namespace pfeed::io {

namespace fs = std::filesystem;

void write_atomic(const fs::path& path, const std::function<void(std::ostream&)>& body, bool binary) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, binary ? std::ios::binary | std::ios::trunc : std::ios::trunc);
    if (!os) throw InputError("cannot open " + tmp.string() + " for writing");
    try {
      body(os);
    } catch (...) {
      os.close();
      fs::remove(tmp);
      throw;
    }
    os.flush();
    if (!os) throw InputError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

std::string join(const std::vector<std::string>& parts, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

void for_each_record(const fs::path& path,
                     const std::function<void(const std::vector<std::string_view>&, std::size_t)>& fn) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot open " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    fn(split(line, '\t'), lineno);
  }
}

std::int64_t parse_int(std::string_view s) {
  std::int64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw InputError("not an integer: '" + std::string(s) + "'");
  return v;
}

double parse_double(std::string_view s) {
  std::string tmp(s);
  char* end = nullptr;
  const double v = std::strtod(tmp.c_str(), &end);
  if (tmp.empty() || end != tmp.c_str() + tmp.size()) throw InputError("not a number: '" + tmp + "'");
  return v;
}

namespace {

template <typename V>
void put(std::ostream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V get(std::istream& is) {
  V v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!is) throw InputError("unexpected end of binary file");
  return v;
}

}  // namespace

void write_u32(std::ostream& os, std::uint32_t v) { put(os, v); }
void write_u64(std::ostream& os, std::uint64_t v) { put(os, v); }
void write_f32(std::ostream& os, float v) { put(os, v); }
void write_f64(std::ostream& os, double v) { put(os, v); }

void write_string(std::ostream& os, std::string_view s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void write_f32_block(std::ostream& os, std::span<const float> values) {
  os.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
}

std::uint32_t read_u32(std::istream& is) { return get<std::uint32_t>(is); }
std::uint64_t read_u64(std::istream& is) { return get<std::uint64_t>(is); }
float read_f32(std::istream& is) { return get<float>(is); }
double read_f64(std::istream& is) { return get<double>(is); }

std::string read_string(std::istream& is) {
  const auto n = read_u32(is);
  if (n > (1u << 24)) throw InputError("implausible string length in binary file");
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw InputError("unexpected end of binary file");
  return s;
}

void read_f32_block(std::istream& is, std::span<float> out) {
  is.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(out.size_bytes()));
  if (!is) throw InputError("unexpected end of binary file");
}

void expect_magic(std::istream& is, std::string_view magic, const fs::path& path) {
  char buf[4] = {};
  is.read(buf, 4);
  if (!is || std::memcmp(buf, magic.data(), 4) != 0) {
    throw InputError(path.string() + ": not a " + std::string(magic) + " file");
  }
}

}  // namespace pfeed::io
