#include "chaosrl/config.hpp"

#include <cctype>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "chaosrl/common.hpp"

namespace chaosrl {

namespace {

std::string strip(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

double parse_double(const std::string& key, const std::string& text) {
    const std::string t = strip(text);
    const char* begin = t.c_str();
    char* end = nullptr;
    const double v = std::strtod(begin, &end);
    if (end == begin || *end != '\0')
        throw ConfigError("config: key '" + key + "' has non-numeric value '" + text + "'");
    return v;
}

long parse_long(const std::string& key, const std::string& text) {
    const std::string t = strip(text);
    const char* begin = t.c_str();
    char* end = nullptr;
    const long v = std::strtol(begin, &end, 10);
    if (end == begin || *end != '\0')
        throw ConfigError("config: key '" + key + "' has non-integer value '" + text + "'");
    return v;
}

std::uint64_t parse_u64(const std::string& key, const std::string& text) {
    const std::string t = strip(text);
    if (!t.empty() && t[0] == '-')
        throw ConfigError("config: key '" + key + "' has negative value '" + text + "'");
    const char* begin = t.c_str();
    char* end = nullptr;
    const unsigned long long v = std::strtoull(begin, &end, 10);
    if (end == begin || *end != '\0')
        throw ConfigError("config: key '" + key + "' has non-integer value '" + text + "'");
    return static_cast<std::uint64_t>(v);
}

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    const std::string t = strip(text);
    if (t.empty()) return out;
    std::string cur;
    for (char c : t) {
        if (c == ',') {
            out.push_back(strip(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(strip(cur));
    return out;
}

}  // namespace

KeyValueConfig KeyValueConfig::parse_string(const std::string& text) {
    KeyValueConfig cfg;
    std::istringstream is(text);
    std::string line, section;
    long lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const std::string t = strip(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        if (t.front() == '[') {
            if (t.back() != ']')
                throw ConfigError("config: malformed section header at line " +
                                  std::to_string(lineno) + ": '" + t + "'");
            section = strip(t.substr(1, t.size() - 2));
            if (section.empty())
                throw ConfigError("config: empty section name at line " + std::to_string(lineno));
            continue;
        }
        const std::size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: expected 'key = value' at line " + std::to_string(lineno) +
                              ": '" + t + "'");
        const std::string key = strip(t.substr(0, eq));
        if (key.empty())
            throw ConfigError("config: empty key at line " + std::to_string(lineno));
        const std::string full = section.empty() ? key : section + "." + key;
        cfg.values_[full] = strip(t.substr(eq + 1));
    }
    return cfg;
}

KeyValueConfig KeyValueConfig::parse_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("config: cannot open '" + path + "'");
    std::ostringstream buf;
    buf << is.rdbuf();
    return parse_string(buf.str());
}

bool KeyValueConfig::has(const std::string& key) const { return values_.count(key) != 0; }

void KeyValueConfig::set(const std::string& key, const std::string& value) {
    values_[key] = value;
}

std::string KeyValueConfig::get_string(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("config: missing required key '" + key + "'");
    return it->second;
}

std::string KeyValueConfig::get_string(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
}

double KeyValueConfig::get_double(const std::string& key) const {
    return parse_double(key, get_string(key));
}

double KeyValueConfig::get_double(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : parse_double(key, it->second);
}

long KeyValueConfig::get_long(const std::string& key) const {
    return parse_long(key, get_string(key));
}

long KeyValueConfig::get_long(const std::string& key, long fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : parse_long(key, it->second);
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    const std::string v = strip(it->second);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config: key '" + key + "' has non-boolean value '" + v + "'");
}

std::vector<double> KeyValueConfig::get_double_list(const std::string& key) const {
    std::vector<double> out;
    for (const auto& tok : split_list(get_string(key))) out.push_back(parse_double(key, tok));
    return out;
}

std::vector<double> KeyValueConfig::get_double_list(const std::string& key,
                                                    const std::vector<double>& fallback) const {
    if (!has(key)) return fallback;
    return get_double_list(key);
}

std::vector<std::uint64_t> KeyValueConfig::get_u64_list(const std::string& key) const {
    std::vector<std::uint64_t> out;
    for (const auto& tok : split_list(get_string(key))) out.push_back(parse_u64(key, tok));
    return out;
}

std::vector<std::uint64_t> KeyValueConfig::get_u64_list(
    const std::string& key, const std::vector<std::uint64_t>& fallback) const {
    if (!has(key)) return fallback;
    return get_u64_list(key);
}

std::vector<long> KeyValueConfig::get_long_list(const std::string& key,
                                                const std::vector<long>& fallback) const {
    if (!has(key)) return fallback;
    std::vector<long> out;
    for (const auto& tok : split_list(get_string(key))) out.push_back(parse_long(key, tok));
    return out;
}

std::string KeyValueConfig::canonical_text() const {
    std::string out;
    for (const auto& [k, v] : values_) {
        out += k;
        out += '=';
        out += v;
        out += '\n';
    }
    return out;
}

}  // namespace chaosrl
