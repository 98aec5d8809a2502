#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>

#include "downscale/data.hpp"
#include "downscale/train.hpp"

namespace downscale {

inline constexpr const char* kArtifactVersion = "0.1.0";

/// Flat key=value config text with [section] headers and # comments. Keys are
/// stored fully qualified as "section.key". Later assignments win.
class ConfigFile {
public:
    ConfigFile() = default;
    static ConfigFile from_file(const std::filesystem::path& path);
    static ConfigFile from_string(const std::string& text);

    /// Command-line override, "section.key=value".
    void set(const std::string& assignment);

    const std::map<std::string, std::string>& entries() const { return entries_; }

private:
    std::map<std::string, std::string> entries_;
};

/// Typed, schema-recording view over a ConfigFile. Every key the program can
/// accept is requested through a getter (registering it and its resolved
/// value); finish() then rejects any file key that was never registered, so
/// typos fail loudly before any work starts.
class ResolvedConfig {
public:
    explicit ResolvedConfig(ConfigFile file) : file_(std::move(file)) {}

    std::string str(const std::string& key, const std::string& def);
    int integer(const std::string& key, int def);
    double real(const std::string& key, double def);
    std::uint64_t u64(const std::string& key, std::uint64_t def);
    std::optional<double> real_opt(const std::string& key);

    /// Throws ConfigError naming the first unknown key, if any.
    void finish() const;

    /// Resolved "key = value" lines, sorted, for the run manifest.
    std::string manifest_body() const;

    /// Force a resolved value (used for flag overrides that bypass the file).
    void pin(const std::string& key, const std::string& value);

private:
    const std::string* lookup(const std::string& key);
    ConfigFile file_;
    std::set<std::string> known_;
    std::map<std::string, std::string> resolved_;
};

// Loaders for the artifact's config schema. Each registers its full key set.
DatasetSpec dataset_from_config(ResolvedConfig& cfg);
TrainConfig train_config_from_config(ResolvedConfig& cfg);
UNetConfig model_from_config(ResolvedConfig& cfg, int in_channels);
LossKind loss_from_config(ResolvedConfig& cfg);
PreprocMode preproc_from_config(ResolvedConfig& cfg);
int matrix_repeats_from_config(ResolvedConfig& cfg);
std::uint64_t matrix_base_seed_from_config(ResolvedConfig& cfg);

/// Registers every key of the artifact schema so a shared config file passes
/// unknown-key validation under any subcommand (invalid values still throw).
void register_full_schema(ResolvedConfig& cfg);

/// Writes manifest.txt (artifact version + command + resolved config).
void write_manifest(const std::filesystem::path& out_dir, const std::string& command,
                    const ResolvedConfig& cfg);

} // namespace downscale
