// Nested key-value configuration files.
//
// Format: INI-style '[section]' headers followed by 'key = value' lines;
// lines whose first non-space character is '#' or ';' are comments.  Keys
// are flattened to "section.key"; keys before any section header keep their
// bare name.  Values are free strings; typed getters parse on demand and
// report the offending key on failure.
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace chaosrl {

class KeyValueConfig {
  public:
    static KeyValueConfig parse_string(const std::string& text);
    static KeyValueConfig parse_file(const std::string& path);

    bool has(const std::string& key) const;
    void set(const std::string& key, const std::string& value);

    // Required-key getters throw ConfigError when the key is missing or the
    // value does not parse; the fallback overloads only throw on bad parses.
    std::string get_string(const std::string& key) const;
    std::string get_string(const std::string& key, const std::string& fallback) const;
    double get_double(const std::string& key) const;
    double get_double(const std::string& key, double fallback) const;
    long get_long(const std::string& key) const;
    long get_long(const std::string& key, long fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;  // true/false/1/0

    // Comma-separated lists; empty string -> empty list.
    std::vector<double> get_double_list(const std::string& key) const;
    std::vector<double> get_double_list(const std::string& key,
                                        const std::vector<double>& fallback) const;
    std::vector<std::uint64_t> get_u64_list(const std::string& key) const;
    std::vector<std::uint64_t> get_u64_list(const std::string& key,
                                            const std::vector<std::uint64_t>& fallback) const;
    std::vector<long> get_long_list(const std::string& key,
                                    const std::vector<long>& fallback) const;

    // Sorted "key=value" lines, one per entry — the canonical form whose
    // checksum identifies a configuration in the run manifest.
    std::string canonical_text() const;

    const std::map<std::string, std::string>& values() const { return values_; }

  private:
    std::map<std::string, std::string> values_;
};

}  // namespace chaosrl
