#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "kerhrm/errors.hpp"

namespace kerhrm {

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t");
    return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& v, const std::string& key);

template <>
inline double parse_number<double>(const std::string& v, const std::string& key) {
    std::size_t used = 0;
    double out = 0;
    try {
        out = std::stod(v, &used);
    } catch (...) {
        throw ConfigError("config: bad numeric value for '" + key + "': " + v);
    }
    if (used != v.size()) throw ConfigError("config: bad numeric value for '" + key + "': " + v);
    return out;
}

template <>
inline long long parse_number<long long>(const std::string& v, const std::string& key) {
    std::size_t used = 0;
    long long out = 0;
    try {
        out = std::stoll(v, &used);
    } catch (...) {
        throw ConfigError("config: bad integer value for '" + key + "': " + v);
    }
    if (used != v.size()) throw ConfigError("config: bad integer value for '" + key + "': " + v);
    return out;
}

inline std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> parts;
    std::string cur;
    for (char ch : v) {
        if (ch == ',') {
            parts.push_back(trim(cur));
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    parts.push_back(trim(cur));
    std::erase_if(parts, [](const std::string& p) { return p.empty(); });
    return parts;
}

} // namespace detail

/// Flat `key = value` config file: one pair per line, '#' starts a comment,
/// keys may appear once. Readers mark keys as consumed; anything left over
/// is an unknown key and rejected.
class KvConfig {
public:
    static KvConfig parse_string(const std::string& text) {
        KvConfig kv;
        std::istringstream in(text);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            line = detail::trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError("config: line " + std::to_string(lineno) + " has no '='");
            std::string key = detail::trim(line.substr(0, eq));
            std::string value = detail::trim(line.substr(eq + 1));
            if (key.empty())
                throw ConfigError("config: line " + std::to_string(lineno) + " has an empty key");
            if (!kv.values_.emplace(key, value).second)
                throw ConfigError("config: duplicate key '" + key + "'");
        }
        return kv;
    }

    static KvConfig parse_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw IoError("cannot open config file " + path);
        std::ostringstream buf;
        buf << in.rdbuf();
        return parse_string(buf.str());
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    std::string get_string(const std::string& key, const std::string& def) {
        auto it = values_.find(key);
        if (it == values_.end()) return def;
        used_.insert(key);
        return it->second;
    }

    double get_double(const std::string& key, double def) {
        auto it = values_.find(key);
        if (it == values_.end()) return def;
        used_.insert(key);
        return detail::parse_number<double>(it->second, key);
    }

    long long get_int(const std::string& key, long long def) {
        auto it = values_.find(key);
        if (it == values_.end()) return def;
        used_.insert(key);
        return detail::parse_number<long long>(it->second, key);
    }

    bool get_bool(const std::string& key, bool def) {
        auto it = values_.find(key);
        if (it == values_.end()) return def;
        used_.insert(key);
        if (it->second == "true" || it->second == "1") return true;
        if (it->second == "false" || it->second == "0") return false;
        throw ConfigError("config: bad boolean for '" + key + "': " + it->second);
    }

    std::vector<double> get_double_list(const std::string& key, std::vector<double> def) {
        auto it = values_.find(key);
        if (it == values_.end()) return def;
        used_.insert(key);
        std::vector<double> out;
        for (const auto& p : detail::split_list(it->second))
            out.push_back(detail::parse_number<double>(p, key));
        return out;
    }

    std::vector<long long> get_int_list(const std::string& key, std::vector<long long> def) {
        auto it = values_.find(key);
        if (it == values_.end()) return def;
        used_.insert(key);
        std::vector<long long> out;
        for (const auto& p : detail::split_list(it->second))
            out.push_back(detail::parse_number<long long>(p, key));
        return out;
    }

    std::vector<std::string> get_string_list(const std::string& key,
                                             std::vector<std::string> def) {
        auto it = values_.find(key);
        if (it == values_.end()) return def;
        used_.insert(key);
        return detail::split_list(it->second);
    }

    void reject_unknown_keys() const {
        std::vector<std::string> unknown;
        for (const auto& [k, v] : values_)
            if (used_.count(k) == 0) unknown.push_back(k);
        if (!unknown.empty()) {
            std::string msg = "config: unknown key(s):";
            for (const auto& k : unknown) msg += " '" + k + "'";
            throw ConfigError(msg);
        }
    }

private:
    std::map<std::string, std::string> values_;
    std::set<std::string> used_;
};

} // namespace kerhrm
