#pragma once

#include "rope/common.hpp"

#include <charconv>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

namespace rope {

/**
 * Flat key-value documents in a small TOML subset:
 *
 *   # comment
 *   key = "string" | 3.5 | 42 | true | [1, 2, 3] | ["a", "b"]
 *   [section]          # later keys become "section.key"
 *
 * Arrays must fit on one line. Nested tables and multi-line strings are not supported.
 */
class ConfigDocument {
public:
    using Scalar = std::variant<bool, double, std::string>;
    struct Value {
        std::vector<Scalar> items;
        bool is_array = false;
    };

    static ConfigDocument parse(const std::string& text) {
        ConfigDocument doc;
        std::istringstream in(text);
        std::string line, section;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const std::string where = "config line " + std::to_string(lineno) + ": ";
            line = trim(strip_comment(line));
            if (line.empty()) continue;
            if (line.front() == '[') {
                if (line.back() != ']') throw ValidationError(where + "unterminated section header");
                section = trim(line.substr(1, line.size() - 2));
                if (section.empty()) throw ValidationError(where + "empty section name");
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string::npos) throw ValidationError(where + "expected key = value");
            std::string key = trim(line.substr(0, eq));
            if (key.empty()) throw ValidationError(where + "missing key");
            if (!section.empty()) key = section + "." + key;
            if (doc.values_.count(key)) throw ValidationError(where + "duplicate key '" + key + "'");
            doc.values_[key] = parse_value(trim(line.substr(eq + 1)), where);
            doc.order_.push_back(key);
        }
        return doc;
    }

    static ConfigDocument load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ValidationError("cannot open config file " + path);
        std::stringstream ss;
        ss << in.rdbuf();
        return parse(ss.str());
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    const std::vector<std::string>& keys() const noexcept { return order_; }

    /// Rejects keys outside `known` so typos do not pass silently.
    void check_known(const std::set<std::string>& known) const {
        for (const auto& k : order_)
            if (!known.count(k)) throw ValidationError("unknown config key '" + k + "'");
    }

    std::string get_string(const std::string& key, const std::string& fallback) const {
        return has(key) ? scalar<std::string>(key) : fallback;
    }
    double get_double(const std::string& key, double fallback) const {
        return has(key) ? scalar<double>(key) : fallback;
    }
    long long get_int(const std::string& key, long long fallback) const {
        return has(key) ? as_int(scalar<double>(key), key) : fallback;
    }
    bool get_bool(const std::string& key, bool fallback) const { return has(key) ? scalar<bool>(key) : fallback; }

    std::vector<double> get_double_list(const std::string& key, std::vector<double> fallback) const {
        return has(key) ? list<double>(key) : fallback;
    }
    std::vector<long long> get_int_list(const std::string& key, std::vector<long long> fallback) const {
        if (!has(key)) return fallback;
        std::vector<long long> out;
        for (double v : list<double>(key)) out.push_back(as_int(v, key));
        return out;
    }
    std::vector<std::string> get_string_list(const std::string& key, std::vector<std::string> fallback) const {
        return has(key) ? list<std::string>(key) : fallback;
    }

    /// Overrides (or adds) a key with a raw value string, as if written in the document.
    void set_raw(const std::string& key, const std::string& raw) {
        if (!has(key)) order_.push_back(key);
        values_[key] = parse_value(trim(raw), "override for " + key + ": ");
    }

private:
    static std::string strip_comment(const std::string& line) {
        bool in_string = false;
        for (std::size_t i = 0; i < line.size(); ++i) {
            if (line[i] == '"') in_string = !in_string;
            if (line[i] == '#' && !in_string) return line.substr(0, i);
        }
        return line;
    }

    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return "";
        const auto e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

    static Scalar parse_scalar(const std::string& tok, const std::string& where) {
        if (tok.empty()) throw ValidationError(where + "missing value");
        if (tok.front() == '"') {
            if (tok.size() < 2 || tok.back() != '"') throw ValidationError(where + "unterminated string");
            return tok.substr(1, tok.size() - 2);
        }
        if (tok == "true") return true;
        if (tok == "false") return false;
        std::string digits;
        for (char c : tok)
            if (c != '_') digits.push_back(c);
        double v = 0.0;
        const auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), v);
        if (ec != std::errc() || ptr != digits.data() + digits.size())
            throw ValidationError(where + "cannot parse value '" + tok + "'");
        return v;
    }

    static Value parse_value(const std::string& text, const std::string& where) {
        Value v;
        if (!text.empty() && text.front() == '[') {
            if (text.back() != ']') throw ValidationError(where + "arrays must close on the same line");
            v.is_array = true;
            std::string body = text.substr(1, text.size() - 2);
            std::string item;
            bool in_string = false;
            for (char c : body) {
                if (c == '"') in_string = !in_string;
                if (c == ',' && !in_string) {
                    if (!trim(item).empty()) v.items.push_back(parse_scalar(trim(item), where));
                    item.clear();
                } else {
                    item.push_back(c);
                }
            }
            if (!trim(item).empty()) v.items.push_back(parse_scalar(trim(item), where));
            return v;
        }
        v.items.push_back(parse_scalar(text, where));
        return v;
    }

    static long long as_int(double v, const std::string& key) {
        if (v != std::floor(v) || std::abs(v) > 9.0e15) throw ValidationError("config key '" + key + "' must be an integer");
        return static_cast<long long>(v);
    }

    template <typename T>
    T scalar(const std::string& key) const {
        const Value& v = values_.at(key);
        if (v.is_array || v.items.size() != 1 || !std::holds_alternative<T>(v.items.front()))
            throw ValidationError("config key '" + key + "' has the wrong type");
        return std::get<T>(v.items.front());
    }

    template <typename T>
    std::vector<T> list(const std::string& key) const {
        const Value& v = values_.at(key);
        std::vector<T> out;
        for (const auto& item : v.items) {
            if (!std::holds_alternative<T>(item)) throw ValidationError("config key '" + key + "' has the wrong element type");
            out.push_back(std::get<T>(item));
        }
        return out;
    }

    std::map<std::string, Value> values_;
    std::vector<std::string> order_;
};

} // namespace rope
