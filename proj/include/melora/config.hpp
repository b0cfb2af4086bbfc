#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "melora/errors.hpp"

namespace melora {

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(s);
    while (std::getline(in, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

} // namespace detail

/// Flat key = value text config; '#' starts a comment, lists are
/// comma-separated. Duplicate keys are rejected to catch copy-paste slips.
class KeyValueConfig {
public:
    static KeyValueConfig parse(std::istream& in, const std::string& origin) {
        KeyValueConfig cfg;
        cfg.origin_ = origin;
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const std::size_t hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            line = detail::trim(line);
            if (line.empty()) continue;
            const std::size_t eq = line.find('=');
            if (eq == std::string::npos) {
                throw FormatError(origin + ":" + std::to_string(lineno) +
                                  ": expected 'key = value', got '" + line + "'");
            }
            const std::string key = detail::trim(line.substr(0, eq));
            const std::string value = detail::trim(line.substr(eq + 1));
            if (key.empty()) {
                throw FormatError(origin + ":" + std::to_string(lineno) + ": empty key");
            }
            if (!cfg.values_.emplace(key, value).second) {
                throw FormatError(origin + ":" + std::to_string(lineno) +
                                  ": duplicate key '" + key + "'");
            }
        }
        return cfg;
    }

    static KeyValueConfig parse_file(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw IoError("cannot open config file " + path.string());
        return parse(in, path.filename().string());
    }

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    std::string get_string(const std::string& key, const std::string& fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    double get_double(const std::string& key, double fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        return parse_double(key, it->second);
    }

    std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        return parse_uint(key, it->second);
    }

    bool get_bool(const std::string& key, bool fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        const std::string v = it->second;
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        throw FormatError(origin_ + ": key '" + key + "': expected boolean, got '" + v +
                          "'");
    }

    std::vector<std::uint64_t> get_uint_list(const std::string& key,
                                             std::vector<std::uint64_t> fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        std::vector<std::uint64_t> out;
        for (const std::string& item : detail::split_list(it->second))
            out.push_back(parse_uint(key, item));
        if (out.empty()) {
            throw FormatError(origin_ + ": key '" + key + "': empty list");
        }
        return out;
    }

    /// Rejects keys outside the allowed set (typo safety).
    void require_known(const std::set<std::string>& allowed) const {
        for (const auto& [key, value] : values_) {
            if (!allowed.count(key)) {
                std::string known;
                for (const std::string& k : allowed) known += (known.empty() ? "" : ", ") + k;
                throw FormatError(origin_ + ": unknown key '" + key + "' (known keys: " +
                                  known + ")");
            }
        }
    }

    const std::string& origin() const { return origin_; }

private:
    double parse_double(const std::string& key, const std::string& v) const {
        try {
            std::size_t pos = 0;
            const double d = std::stod(v, &pos);
            if (pos != v.size()) throw std::invalid_argument(v);
            return d;
        } catch (const std::exception&) {
            throw FormatError(origin_ + ": key '" + key + "': expected number, got '" + v +
                              "'");
        }
    }

    std::uint64_t parse_uint(const std::string& key, const std::string& v) const {
        try {
            std::size_t pos = 0;
            const unsigned long long u = std::stoull(v, &pos);
            if (pos != v.size()) throw std::invalid_argument(v);
            return static_cast<std::uint64_t>(u);
        } catch (const std::exception&) {
            throw FormatError(origin_ + ": key '" + key +
                              "': expected non-negative integer, got '" + v + "'");
        }
    }

    std::map<std::string, std::string> values_;
    std::string origin_;
};

} // namespace melora
