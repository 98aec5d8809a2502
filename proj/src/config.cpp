#include "downscale/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

namespace downscale {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

} // namespace

ConfigFile ConfigFile::from_string(const std::string& text) {
    ConfigFile cfg;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        line = trim(line);
        if (line.empty() || line[0] == '#') continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError("config line " + std::to_string(lineno) + ": malformed section header");
            section = trim(line.substr(1, line.size() - 2));
            if (section.empty())
                throw ConfigError("config line " + std::to_string(lineno) + ": empty section name");
            continue;
        }
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
        cfg.entries_[section.empty() ? key : section + "." + key] = value;
    }
    return cfg;
}

ConfigFile ConfigFile::from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return from_string(ss.str());
}

void ConfigFile::set(const std::string& assignment) {
    const std::size_t eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError("override must be section.key=value, got '" + assignment + "'");
    entries_[trim(assignment.substr(0, eq))] = trim(assignment.substr(eq + 1));
}

const std::string* ResolvedConfig::lookup(const std::string& key) {
    known_.insert(key);
    auto it = file_.entries().find(key);
    return it == file_.entries().end() ? nullptr : &it->second;
}

std::string ResolvedConfig::str(const std::string& key, const std::string& def) {
    const std::string* v = lookup(key);
    const std::string out = v ? *v : def;
    resolved_[key] = out;
    return out;
}

int ResolvedConfig::integer(const std::string& key, int def) {
    const std::string* v = lookup(key);
    int out = def;
    if (v) {
        try {
            std::size_t pos = 0;
            out = std::stoi(*v, &pos);
            if (pos != v->size()) throw std::invalid_argument("trailing");
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "': expected an integer, got '" + *v + "'");
        }
    }
    resolved_[key] = std::to_string(out);
    return out;
}

double ResolvedConfig::real(const std::string& key, double def) {
    const std::string* v = lookup(key);
    double out = def;
    if (v) {
        try {
            std::size_t pos = 0;
            out = std::stod(*v, &pos);
            if (pos != v->size()) throw std::invalid_argument("trailing");
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "': expected a real, got '" + *v + "'");
        }
    }
    resolved_[key] = format_double(out);
    return out;
}

std::uint64_t ResolvedConfig::u64(const std::string& key, std::uint64_t def) {
    const std::string* v = lookup(key);
    std::uint64_t out = def;
    if (v) {
        try {
            std::size_t pos = 0;
            out = std::stoull(*v, &pos);
            if (pos != v->size()) throw std::invalid_argument("trailing");
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "': expected an unsigned integer, got '" + *v + "'");
        }
    }
    resolved_[key] = std::to_string(out);
    return out;
}

std::optional<double> ResolvedConfig::real_opt(const std::string& key) {
    const std::string* v = lookup(key);
    if (!v || v->empty()) {
        resolved_[key] = "";
        return std::nullopt;
    }
    try {
        std::size_t pos = 0;
        const double out = std::stod(*v, &pos);
        if (pos != v->size()) throw std::invalid_argument("trailing");
        resolved_[key] = format_double(out);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected a real, got '" + *v + "'");
    }
}

void ResolvedConfig::pin(const std::string& key, const std::string& value) {
    known_.insert(key);
    resolved_[key] = value;
}

void ResolvedConfig::finish() const {
    for (const auto& [key, value] : file_.entries()) {
        if (!known_.count(key))
            throw ConfigError("unknown config key '" + key + "'");
    }
}

std::string ResolvedConfig::manifest_body() const {
    std::ostringstream os;
    for (const auto& [key, value] : resolved_) os << key << " = " << value << "\n";
    return os.str();
}

// ---- schema loaders ----

DatasetSpec dataset_from_config(ResolvedConfig& cfg) {
    DatasetSpec s;
    s.variable = variable_from_name(cfg.str("data.variable", variable_name(s.variable)));
    s.n_train = cfg.integer("data.n_train", s.n_train);
    s.n_val = cfg.integer("data.n_val", s.n_val);
    s.n_test = cfg.integer("data.n_test", s.n_test);
    s.fine_h = cfg.integer("data.fine_h", s.fine_h);
    s.fine_w = cfg.integer("data.fine_w", s.fine_w);
    s.coarsen_factor = cfg.integer("data.coarsen_factor", s.coarsen_factor);
    s.seed = cfg.u64("data.seed", s.seed);
    s.modes = cfg.integer("data.modes", s.modes);
    s.spectral_exponent = cfg.real("data.spectral_exponent", s.spectral_exponent);
    s.k_min = cfg.real("data.k_min", s.k_min);
    s.k_max = cfg.real("data.k_max", s.k_max);
    s.temp_mean = cfg.real("data.temp_mean", s.temp_mean);
    s.temp_std = cfg.real("data.temp_std", s.temp_std);
    s.lapse_per_unit = cfg.real("data.lapse_per_unit", s.lapse_per_unit);
    s.elevation_scale = cfg.real("data.elevation_scale", s.elevation_scale);
    s.precip_log_scale = cfg.real("data.precip_log_scale", s.precip_log_scale);
    s.precip_zero_z = cfg.real("data.precip_zero_z", s.precip_zero_z);
    s.rescale_mean = cfg.real_opt("data.rescale_mean");
    s.rescale_std = cfg.real_opt("data.rescale_std");
    return s;
}

TrainConfig train_config_from_config(ResolvedConfig& cfg) {
    TrainConfig t;
    t.epochs = cfg.integer("train.epochs", t.epochs);
    t.batch_size = cfg.integer("train.batch_size", t.batch_size);
    t.learning_rate = cfg.real("train.learning_rate", t.learning_rate);
    t.beta1 = cfg.real("train.beta1", t.beta1);
    t.beta2 = cfg.real("train.beta2", t.beta2);
    t.epsilon = cfg.real("train.epsilon", t.epsilon);
    t.seed = cfg.u64("train.seed", t.seed);
    return t;
}

UNetConfig model_from_config(ResolvedConfig& cfg, int in_channels) {
    const std::string preset = cfg.str("model.preset", "desk");
    UNetConfig m;
    if (preset == "desk") {
        m = UNetConfig::desk(in_channels);
    } else if (preset == "paper") {
        m = UNetConfig::paper(in_channels);
    } else {
        throw ConfigError("model.preset must be desk or paper, got '" + preset + "'");
    }
    m.base_width = cfg.integer("model.base_width", m.base_width);
    m.kernel_size = cfg.integer("model.kernel_size", m.kernel_size);
    const std::string skips = cfg.str("model.skip_links", "2,3");
    m.skip_links.clear();
    std::istringstream ss(skips);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        try {
            m.skip_links.push_back(std::stoi(tok));
        } catch (const std::exception&) {
            throw ConfigError("model.skip_links: expected comma-separated group indices, got '" + skips + "'");
        }
    }
    const std::string mode = cfg.str("model.skip_mode", "concat");
    if (mode == "concat") {
        m.skip_mode = SkipMode::Concat;
    } else if (mode == "add") {
        m.skip_mode = SkipMode::Add;
    } else {
        throw ConfigError("model.skip_mode must be concat or add, got '" + mode + "'");
    }
    return m;
}

LossKind loss_from_config(ResolvedConfig& cfg) { return loss_from_name(cfg.str("train.loss", "L1")); }

PreprocMode preproc_from_config(ResolvedConfig& cfg) {
    return preproc_from_name(cfg.str("train.preproc", "none"));
}

int matrix_repeats_from_config(ResolvedConfig& cfg) { return cfg.integer("matrix.seed_repeats", 3); }

std::uint64_t matrix_base_seed_from_config(ResolvedConfig& cfg) { return cfg.u64("matrix.base_seed", 0); }

void register_full_schema(ResolvedConfig& cfg) {
    (void)dataset_from_config(cfg);
    (void)train_config_from_config(cfg);
    (void)model_from_config(cfg, 6);
    (void)loss_from_config(cfg);
    (void)preproc_from_config(cfg);
    (void)matrix_repeats_from_config(cfg);
    (void)matrix_base_seed_from_config(cfg);
}

void write_manifest(const std::filesystem::path& out_dir, const std::string& command,
                    const ResolvedConfig& cfg) {
    std::ofstream out(out_dir / "manifest.txt", std::ios::trunc);
    if (!out) throw FormatError("cannot write manifest in " + out_dir.string());
    out << "artifact_version = " << kArtifactVersion << "\n";
    out << "command = " << command << "\n";
    out << cfg.manifest_body();
}

} // namespace downscale
