#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mtpose {

/// Flat `key=value` text configuration. Blank lines and lines starting with
/// '#' are ignored; surrounding whitespace is trimmed.
class KeyValueConfig {
  public:
    KeyValueConfig() = default;

    static KeyValueConfig parse(const std::string& text, const std::string& origin = "<string>") {
        KeyValueConfig cfg;
        std::istringstream in(text);
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const std::string t = trim(line);
            if (t.empty() || t[0] == '#') continue;
            const auto eq = t.find('=');
            if (eq == std::string::npos) {
                throw std::invalid_argument(origin + ":" + std::to_string(lineno) + ": expected key=value, got '" + t +
                                            "'");
            }
            const std::string key = trim(t.substr(0, eq));
            if (key.empty()) throw std::invalid_argument(origin + ":" + std::to_string(lineno) + ": empty key");
            cfg.values_[key] = trim(t.substr(eq + 1));
        }
        return cfg;
    }

    static KeyValueConfig load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("cannot open config file '" + path + "'");
        std::stringstream ss;
        ss << in.rdbuf();
        return parse(ss.str(), path);
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    std::string get(const std::string& key, const std::string& fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    int get_int(const std::string& key, int fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            std::size_t pos = 0;
            const int v = std::stoi(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("trailing characters");
            return v;
        } catch (const std::exception&) {
            throw std::invalid_argument("config key '" + key + "': expected integer, got '" + it->second + "'");
        }
    }

    double get_double(const std::string& key, double fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            std::size_t pos = 0;
            const double v = std::stod(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("trailing characters");
            return v;
        } catch (const std::exception&) {
            throw std::invalid_argument("config key '" + key + "': expected number, got '" + it->second + "'");
        }
    }

    bool get_bool(const std::string& key, bool fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        const auto& v = it->second;
        if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
        if (v == "0" || v == "false" || v == "no" || v == "off") return false;
        throw std::invalid_argument("config key '" + key + "': expected boolean, got '" + v + "'");
    }

    /// Comma-separated list of numbers, e.g. "0.5,0.375,0.125".
    std::vector<double> get_list(const std::string& key, std::vector<double> fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        std::vector<double> out;
        std::stringstream ss(it->second);
        std::string item;
        while (std::getline(ss, item, ',')) {
            item = trim(item);
            if (item.empty()) continue;
            try {
                out.push_back(std::stod(item));
            } catch (const std::exception&) {
                throw std::invalid_argument("config key '" + key + "': bad list element '" + item + "'");
            }
        }
        return out;
    }

    void set(const std::string& key, const std::string& value) { values_[key] = value; }
    template <typename T>
    void set(const std::string& key, const T& value) {
        std::ostringstream os;
        os.precision(17);
        os << value;
        values_[key] = os.str();
    }

    const std::map<std::string, std::string>& values() const { return values_; }

    std::string to_string() const {
        std::string out;
        for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
        return out;
    }

    /// Keys present here but absent from `known`.
    std::vector<std::string> unknown_keys(const std::vector<std::string>& known) const {
        std::vector<std::string> out;
        for (const auto& [k, v] : values_) {
            bool found = false;
            for (const auto& kk : known) found = found || kk == k;
            if (!found) out.push_back(k);
        }
        return out;
    }

  private:
    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return "";
        const auto e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

    std::map<std::string, std::string> values_;
};

}  // namespace mtpose
