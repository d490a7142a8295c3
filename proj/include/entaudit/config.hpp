#pragma once

// Experiment configuration: an INI/TOML-style file with [section] headers
// and key = value lines. Values are strings (optionally quoted), numbers,
// booleans, or flat [a, b, c] lists. Sections hash canonically so the run
// ledger can detect configuration drift per stage.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "entaudit/rng.hpp"

namespace entaudit {

class ConfigFile {
  public:
    static ConfigFile parse_file(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw std::runtime_error("config: cannot open " + path);
        std::stringstream ss;
        ss << in.rdbuf();
        return parse_string(ss.str(), path);
    }

    static ConfigFile parse_string(const std::string& text, const std::string& origin = "<string>") {
        ConfigFile cfg;
        std::istringstream in(text);
        std::string line, section;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            std::string s = strip(line);
            if (s.empty() || s[0] == '#' || s[0] == ';') continue;
            if (s.front() == '[') {
                if (s.back() != ']')
                    throw std::runtime_error("config: unterminated section at " + origin + ":" +
                                             std::to_string(line_no));
                section = strip(s.substr(1, s.size() - 2));
                if (section.empty())
                    throw std::runtime_error("config: empty section name at " + origin + ":" +
                                             std::to_string(line_no));
                cfg.sections_[section];  // allow empty sections
                continue;
            }
            auto eq = s.find('=');
            if (eq == std::string::npos)
                throw std::runtime_error("config: expected key = value at " + origin + ":" +
                                         std::to_string(line_no));
            std::string key = strip(s.substr(0, eq));
            std::string value = strip(s.substr(eq + 1));
            if (key.empty())
                throw std::runtime_error("config: empty key at " + origin + ":" +
                                         std::to_string(line_no));
            // trailing comment (quotes protect '#')
            if (!value.empty() && value[0] != '"') {
                auto hash = value.find('#');
                if (hash != std::string::npos) value = strip(value.substr(0, hash));
            }
            if (value.size() >= 2 && value.front() == '"' && value.back() == '"')
                value = value.substr(1, value.size() - 2);
            cfg.sections_[section][key] = value;
        }
        return cfg;
    }

    bool has_section(const std::string& section) const { return sections_.count(section) > 0; }

    // command-line overrides are spliced in before resolution
    void set(const std::string& section, const std::string& key, const std::string& value) {
        sections_[section][key] = value;
    }

    bool has(const std::string& section, const std::string& key) const {
        auto it = sections_.find(section);
        return it != sections_.end() && it->second.count(key) > 0;
    }

    std::string get_string(const std::string& section, const std::string& key) const {
        auto it = sections_.find(section);
        if (it == sections_.end())
            throw std::runtime_error("config: missing section [" + section + "]");
        auto kt = it->second.find(key);
        if (kt == it->second.end())
            throw std::runtime_error("config: missing key " + key + " in [" + section + "]");
        return kt->second;
    }

    std::string get_string(const std::string& section, const std::string& key,
                           const std::string& fallback) const {
        return has(section, key) ? get_string(section, key) : fallback;
    }

    long get_int(const std::string& section, const std::string& key) const {
        return parse_int(get_string(section, key), section, key);
    }
    long get_int(const std::string& section, const std::string& key, long fallback) const {
        return has(section, key) ? get_int(section, key) : fallback;
    }

    double get_double(const std::string& section, const std::string& key) const {
        const std::string v = get_string(section, key);
        try {
            std::size_t pos = 0;
            double d = std::stod(v, &pos);
            if (pos != v.size()) throw std::invalid_argument(v);
            return d;
        } catch (const std::exception&) {
            throw std::runtime_error("config: " + key + " in [" + section + "] is not a number: " + v);
        }
    }
    double get_double(const std::string& section, const std::string& key, double fallback) const {
        return has(section, key) ? get_double(section, key) : fallback;
    }

    bool get_bool(const std::string& section, const std::string& key, bool fallback) const {
        if (!has(section, key)) return fallback;
        std::string v = get_string(section, key);
        std::transform(v.begin(), v.end(), v.begin(),
                       [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
        if (v == "true" || v == "yes" || v == "1") return true;
        if (v == "false" || v == "no" || v == "0") return false;
        throw std::runtime_error("config: " + key + " in [" + section + "] is not a boolean");
    }

    std::vector<long> get_int_list(const std::string& section, const std::string& key) const {
        std::vector<long> out;
        for (const auto& t : split_list(get_string(section, key), section, key))
            out.push_back(parse_int(t, section, key));
        return out;
    }

    std::vector<std::string> get_string_list(const std::string& section,
                                             const std::string& key) const {
        std::vector<std::string> out;
        for (auto t : split_list(get_string(section, key), section, key)) {
            if (t.size() >= 2 && t.front() == '"' && t.back() == '"')
                t = t.substr(1, t.size() - 2);
            out.push_back(t);
        }
        return out;
    }

    // canonical digest of one section: sorted key=value lines
    std::uint64_t section_hash(const std::string& section) const {
        std::uint64_t h = fnv1a64(section);
        auto it = sections_.find(section);
        if (it == sections_.end()) return h;
        for (const auto& [key, value] : it->second) {  // map iterates sorted
            h = fnv1a64(key, h);
            h = fnv1a64("=", h);
            h = fnv1a64(value, h);
            h = fnv1a64("\n", h);
        }
        return h;
    }

    const std::map<std::string, std::map<std::string, std::string>>& sections() const {
        return sections_;
    }

  private:
    static std::string strip(const std::string& s) {
        std::size_t b = 0, e = s.size();
        while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r')) ++b;
        while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
        return s.substr(b, e - b);
    }

    static std::vector<std::string> split_list(const std::string& v, const std::string& section,
                                               const std::string& key) {
        std::string s = strip(v);
        if (s.size() < 2 || s.front() != '[' || s.back() != ']')
            throw std::runtime_error("config: " + key + " in [" + section + "] is not a list");
        s = s.substr(1, s.size() - 2);
        std::vector<std::string> out;
        std::istringstream ss(s);
        std::string item;
        while (std::getline(ss, item, ',')) {
            std::string t = strip(item);
            if (!t.empty()) out.push_back(t);
        }
        return out;
    }

    static long parse_int(const std::string& v, const std::string& section,
                          const std::string& key) {
        try {
            std::size_t pos = 0;
            long n = std::stol(v, &pos, 10);
            if (pos != v.size()) throw std::invalid_argument(v);
            return n;
        } catch (const std::exception&) {
            throw std::runtime_error("config: " + key + " in [" + section +
                                     "] is not an integer: " + v);
        }
    }

    std::map<std::string, std::map<std::string, std::string>> sections_;
};

}  // namespace entaudit
