#include "stemfold/text_format.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "stemfold/errors.hpp"

namespace stemfold {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<double> parse_double_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw InvalidArgument("not a number: '" + item + "'");
    }
  }
  return out;
}

std::string join_doubles(const std::vector<double>& values) {
  std::string s;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) s += ',';
    s += format_double(values[i]);
  }
  return s;
}

void KeyValueFile::set(const std::string& key, const std::string& value) {
  if (key.empty() || key.find_first_of("=\n#") != std::string::npos) {
    throw InvalidArgument("invalid key '" + key + "'");
  }
  if (value.find('\n') != std::string::npos) throw InvalidArgument("multi-line value for " + key);
  for (auto& [k, v] : entries_) {
    if (k == key) {
      v = value;
      return;
    }
  }
  entries_.emplace_back(key, value);
}

void KeyValueFile::set(const std::string& key, double value) { set(key, format_double(value)); }
void KeyValueFile::set(const std::string& key, std::int64_t value) {
  set(key, std::to_string(value));
}
void KeyValueFile::set(const std::string& key, std::uint64_t value) {
  set(key, std::to_string(value));
}
void KeyValueFile::set(const std::string& key, bool value) {
  set(key, std::string(value ? "true" : "false"));
}

bool KeyValueFile::contains(const std::string& key) const { return get(key).has_value(); }

std::optional<std::string> KeyValueFile::get(const std::string& key) const {
  for (const auto& [k, v] : entries_) {
    if (k == key) return v;
  }
  return std::nullopt;
}

std::string KeyValueFile::require(const std::string& key) const {
  auto v = get(key);
  if (!v) throw DataError("missing key '" + key + "'");
  return *v;
}

double KeyValueFile::get_double(const std::string& key) const {
  const std::string s = require(key);
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError("key '" + key + "' is not a number: " + s);
  }
}

std::int64_t KeyValueFile::get_int(const std::string& key) const {
  const std::string s = require(key);
  std::int64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw DataError("key '" + key + "' is not an integer: " + s);
  }
  return v;
}

std::uint64_t KeyValueFile::get_u64(const std::string& key) const {
  const std::string s = require(key);
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw DataError("key '" + key + "' is not an unsigned integer: " + s);
  }
  return v;
}

bool KeyValueFile::get_bool(const std::string& key) const {
  const std::string s = require(key);
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw DataError("key '" + key + "' is not a boolean: " + s);
}

double KeyValueFile::get_double_or(const std::string& key, double fallback) const {
  return contains(key) ? get_double(key) : fallback;
}
std::int64_t KeyValueFile::get_int_or(const std::string& key, std::int64_t fallback) const {
  return contains(key) ? get_int(key) : fallback;
}
bool KeyValueFile::get_bool_or(const std::string& key, bool fallback) const {
  return contains(key) ? get_bool(key) : fallback;
}

std::string KeyValueFile::to_string() const {
  std::string out;
  for (const auto& [k, v] : entries_) out += k + " = " + v + "\n";
  return out;
}

KeyValueFile KeyValueFile::parse(const std::string& text) {
  KeyValueFile f;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == '[') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw DataError("line " + std::to_string(lineno) + ": expected key = value");
    }
    f.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  return f;
}

KeyValueFile KeyValueFile::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

void KeyValueFile::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << to_string();
  if (!out) throw IoError("write failed for " + path.string());
}

void Fnv1a::update(const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h_ ^= p[i];
    h_ *= 0x100000001b3ULL;
  }
}

std::string Fnv1a::hex() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h_));
  return buf;
}

}  // namespace stemfold
