#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace crossdqn {

/// Structured text config: key-value pairs grouped into nested sections.
///
///   crossdqn-config-v1
///   [env]
///   k = 5
///   [env.behavior]
///   position_decay = 0.9
///
/// Section headers set a dotted prefix for the keys that follow, so the
/// lines above define "env.k" and "env.behavior.position_decay". Keys are
/// stored flat; writing groups them back into sections sorted by name,
/// which makes write/parse a stable round trip. '#' starts a comment line.
class Config {
  public:
    static constexpr const char* kHeader = "crossdqn-config-v1";

    Config() = default;

    static Config parse_stream(std::istream& is, const std::string& where = "<stream>") {
        Config cfg;
        std::string line;
        std::size_t lineno = 0;
        bool saw_header = false;
        std::string section;
        while (std::getline(is, line)) {
            ++lineno;
            const std::string t = trim(line);
            if (t.empty() || t[0] == '#') continue;
            if (!saw_header) {
                if (t != kHeader)
                    throw std::runtime_error(where + ":" + std::to_string(lineno) +
                                             ": expected '" + kHeader + "', got '" + t + "'");
                saw_header = true;
                continue;
            }
            if (t.front() == '[') {
                if (t.back() != ']')
                    throw std::runtime_error(where + ":" + std::to_string(lineno) +
                                             ": unterminated section header");
                section = trim(t.substr(1, t.size() - 2));
                continue;
            }
            const auto eq = t.find('=');
            if (eq == std::string::npos)
                throw std::runtime_error(where + ":" + std::to_string(lineno) +
                                         ": expected key = value, got '" + t + "'");
            std::string key = trim(t.substr(0, eq));
            const std::string value = trim(t.substr(eq + 1));
            if (key.empty())
                throw std::runtime_error(where + ":" + std::to_string(lineno) + ": empty key");
            if (!section.empty()) key = section + "." + key;
            cfg.values_[key] = value;
        }
        if (!saw_header)
            throw std::runtime_error(where + ": missing '" + std::string(kHeader) + "' header");
        return cfg;
    }

    static Config parse_file(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw std::runtime_error("cannot open config file '" + path + "'");
        return parse_stream(f, path);
    }

    static Config parse_string(const std::string& text) {
        std::istringstream ss(text);
        return parse_stream(ss);
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    void set(const std::string& key, const std::string& value) { values_[key] = value; }
    void set(const std::string& key, double v) { values_[key] = format_double(v); }
    void set(const std::string& key, std::int64_t v) { values_[key] = std::to_string(v); }
    void set(const std::string& key, std::uint64_t v) { values_[key] = std::to_string(v); }
    void set(const std::string& key, bool v) { values_[key] = v ? "true" : "false"; }

    /// Applies a command-line override of the form "dotted.key=value".
    void set_assignment(const std::string& assignment) {
        const auto eq = assignment.find('=');
        if (eq == std::string::npos || eq == 0)
            throw std::runtime_error("bad override '" + assignment + "', want key=value");
        values_[trim(assignment.substr(0, eq))] = trim(assignment.substr(eq + 1));
    }

    /// Overlays every entry of `other` on top of this config.
    void merge(const Config& other) {
        for (const auto& [k, v] : other.values_) values_[k] = v;
    }

    std::string get_str(const std::string& key, const std::string& def) const {
        auto it = values_.find(key);
        return it == values_.end() ? def : it->second;
    }

    std::string require_str(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw std::runtime_error("config: missing required key '" + key + "'");
        return it->second;
    }

    double get_double(const std::string& key, double def) const {
        auto it = values_.find(key);
        return it == values_.end() ? def : parse_double(key, it->second);
    }

    std::int64_t get_int(const std::string& key, std::int64_t def) const {
        auto it = values_.find(key);
        return it == values_.end() ? def : parse_int(key, it->second);
    }

    bool get_bool(const std::string& key, bool def) const {
        auto it = values_.find(key);
        if (it == values_.end()) return def;
        if (it->second == "true" || it->second == "1") return true;
        if (it->second == "false" || it->second == "0") return false;
        throw std::runtime_error("config: key '" + key + "' is not a boolean: '" + it->second + "'");
    }

    /// Comma-separated list of numbers, e.g. "0, 0.5, 1".
    std::vector<double> get_double_list(const std::string& key,
                                        const std::vector<double>& def) const {
        auto it = values_.find(key);
        if (it == values_.end()) return def;
        std::vector<double> out;
        std::string item;
        std::istringstream ss(it->second);
        while (std::getline(ss, item, ',')) out.push_back(parse_double(key, trim(item)));
        if (out.empty()) throw std::runtime_error("config: key '" + key + "' is an empty list");
        return out;
    }

    std::vector<std::size_t> get_size_list(const std::string& key,
                                           const std::vector<std::size_t>& def) const {
        auto it = values_.find(key);
        if (it == values_.end()) return def;
        std::vector<std::size_t> out;
        std::string item;
        std::istringstream ss(it->second);
        while (std::getline(ss, item, ',')) {
            const std::int64_t v = parse_int(key, trim(item));
            if (v < 0) throw std::runtime_error("config: key '" + key + "' has negative entry");
            out.push_back(static_cast<std::size_t>(v));
        }
        if (out.empty()) throw std::runtime_error("config: key '" + key + "' is an empty list");
        return out;
    }

    const std::map<std::string, std::string>& entries() const { return values_; }

    void write(std::ostream& os) const {
        os << kHeader << "\n";
        // Root keys first: once a [section] header is emitted there is no
        // way to return to the root scope on re-parse.
        for (const auto& [key, value] : values_)
            if (key.rfind('.') == std::string::npos) os << key << " = " << value << "\n";
        std::string current_section;
        for (const auto& [key, value] : values_) {
            const auto dot = key.rfind('.');
            if (dot == std::string::npos) continue;
            const std::string section = key.substr(0, dot);
            if (section != current_section) {
                os << "[" << section << "]\n";
                current_section = section;
            }
            os << key.substr(dot + 1) << " = " << value << "\n";
        }
    }

    void write_file(const std::string& path) const {
        std::ofstream f(path);
        if (!f) throw std::runtime_error("cannot write config file '" + path + "'");
        write(f);
    }

    bool operator==(const Config& other) const { return values_ == other.values_; }

    static std::string format_double(double v) {
        std::ostringstream ss;
        ss.precision(17);
        ss << v;
        return ss.str();
    }

  private:
    static std::string trim(const std::string& s) {
        std::size_t b = 0, e = s.size();
        while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
        while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
        return s.substr(b, e - b);
    }

    static double parse_double(const std::string& key, const std::string& v) {
        const char* begin = v.c_str();
        char* end = nullptr;
        const double x = std::strtod(begin, &end);
        if (end == begin || *end != '\0')
            throw std::runtime_error("config: key '" + key + "' is not a number: '" + v + "'");
        return x;
    }

    static std::int64_t parse_int(const std::string& key, const std::string& v) {
        const char* begin = v.c_str();
        char* end = nullptr;
        const long long x = std::strtoll(begin, &end, 10);
        if (end == begin || *end != '\0')
            throw std::runtime_error("config: key '" + key + "' is not an integer: '" + v + "'");
        return x;
    }

    std::map<std::string, std::string> values_;
};

}  // namespace crossdqn
