#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace l3d::io {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// INI-style run configuration. Sections map to modules; keys are addressed
// as "section.key". Values are free-form strings with typed accessors.
class Config {
public:
    Config() = default;

    static Config load(const std::filesystem::path& path);
    static Config parse(const std::string& text);

    // Override in "section.key=value" form (CLI --set).
    void set(const std::string& dotted_key, const std::string& value);

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    std::string get_string(const std::string& key, const std::string& fallback) const;
    std::string require_string(const std::string& key) const;
    double get_double(const std::string& key, double fallback) const;
    std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    std::vector<double> get_doubles(const std::string& key, std::vector<double> fallback) const;
    std::vector<std::int64_t> get_ints(const std::string& key,
                                       std::vector<std::int64_t> fallback) const;

    // Fully resolved key=value dump, grouped by section, stable order.
    std::string serialize() const;
    void save(const std::filesystem::path& path) const;

    const std::map<std::string, std::string>& entries() const { return values_; }

private:
    std::map<std::string, std::string> values_;
};

}  // namespace l3d::io
