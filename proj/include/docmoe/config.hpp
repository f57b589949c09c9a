#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "docmoe/synth.hpp"
#include "docmoe/trainer.hpp"

namespace docmoe {

class ConfigError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigKey {
    enum class Type { Int, Double, String, Bool };
    std::string name;
    Type type;
    nlohmann::json default_value;  // null: filled in by resolve()
    std::string help;
};

/// Every key a config file or a `--<key>` flag may set.
const std::vector<ConfigKey>& config_keys();

/// Flat key/value experiment record: defaults, then the config file, then
/// command-line overrides. resolve() must run before any accessor below.
class RunConfig {
public:
    RunConfig();

    /// Throws ConfigError on unreadable JSON, unknown keys or wrong types.
    void merge_file(const std::filesystem::path& path);
    void merge_json(const nlohmann::json& j);
    /// Parses `value` according to the key's type.
    void set(const std::string& key, const std::string& value);

    /// Fills architecture keys left unset from the `arch` preset and validates
    /// everything; throws ConfigError.
    void resolve();

    const nlohmann::json& values() const { return values_; }
    template <typename T>
    T get(const std::string& key) const {
        return values_.at(key).get<T>();
    }

    ArchConfig arch() const;
    CorpusSpec corpus_spec() const;
    TrainConfig train_config() const;

    /// Writes resolved_config.json into `dir`.
    void echo_to(const std::filesystem::path& dir) const;

private:
    void check_type(const ConfigKey& k, const nlohmann::json& v) const;
    nlohmann::json values_;
    bool resolved_ = false;
};

}  // namespace docmoe
