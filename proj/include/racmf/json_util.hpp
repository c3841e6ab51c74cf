#pragma once

#include <set>
#include <string>

#include <json.hpp>

#include "racmf/errors.hpp"

namespace racmf {

/// Reads optional fields from a JSON object and rejects keys nobody asked for.
class StrictObject {
public:
    StrictObject(const nlohmann::json& j, std::string section) : j_(j), section_(std::move(section)) {
        if (!j_.is_object()) throw SpecError(section_, "expected a JSON object");
    }

    template <typename T>
    StrictObject& get(const char* key, T& out) {
        seen_.insert(key);
        if (auto it = j_.find(key); it != j_.end()) {
            try {
                out = it->template get<T>();
            } catch (const nlohmann::json::exception&) {
                throw SpecError(path(key), "wrong type: " + it->dump());
            }
        }
        return *this;
    }

    bool has(const char* key) const { return j_.contains(key); }
    const nlohmann::json& raw(const char* key) {
        seen_.insert(key);
        return j_.at(key);
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key())) throw SpecError(path(it.key()), "unknown key");
    }

    std::string path(const std::string& key) const { return section_.empty() ? key : section_ + "." + key; }

private:
    const nlohmann::json& j_;
    std::string section_;
    std::set<std::string> seen_;
};

}  // namespace racmf
