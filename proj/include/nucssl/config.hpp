#pragma once

// Run configuration: a sectioned key-value text file.
//
//   # comment            (also ';')
//   [section]
//   key = value
//
// Sections and keys are fixed (see docs/formats.md); unknown ones, duplicate
// keys and malformed values are errors. Values: integers in decimal, reals in
// any form std::from_chars accepts, booleans `true`/`false`, lists
// comma-separated. dump_config() writes every field in canonical form (reals
// in shortest round-trip notation), so parse -> dump -> parse is a fixed point.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <system_error>
#include <type_traits>
#include <utility>
#include <vector>

#include "nucssl/errors.hpp"
#include "nucssl/losses.hpp"
#include "nucssl/postprocess.hpp"
#include "nucssl/pretrain.hpp"
#include "nucssl/segmenter.hpp"
#include "nucssl/synth.hpp"

namespace nucssl {

struct DataConfig {
    std::string root = "data";
    double split_ratio = 0.8;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(split_ratio > 0.0 && split_ratio <= 1.0)) {
            throw ConfigError("data.split_ratio must lie in (0, 1]");
        }
    }

    friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

// [sampler], [encoder] and [loss] live inside `pretrain`; the segmenter takes
// its encoder from there and postprocess its boundary width from [segmenter].
struct RunConfig {
    DataConfig data;
    PretrainConfig pretrain;
    SegModelConfig segmenter;
    FinetuneConfig finetune;
    PostprocessConfig postprocess;
    SynthConfig synth;

    SegModelConfig seg_model() const {
        SegModelConfig s = segmenter;
        s.encoder = pretrain.encoder;
        return s;
    }

    PostprocessConfig post() const {
        PostprocessConfig p = postprocess;
        p.boundary_width = segmenter.boundary_width;
        return p;
    }

    void validate() const {
        data.validate();
        pretrain.validate();
        seg_model().validate();
        finetune.validate();
        post().validate();
        synth.validate();
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <class V>
V parse_number(const std::string& text) {
    V v{};
    const char* first = text.data();
    const char* last = text.data() + text.size();
    if constexpr (std::is_unsigned_v<V>) {
        if (!text.empty() && text[0] == '-') {
            throw ConfigError("expected a non-negative integer, got '" + text + "'");
        }
    }
    const auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || ptr != last || text.empty()) {
        throw ConfigError("malformed number '" + text + "'");
    }
    return v;
}

inline std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    if (trim(text).empty()) {
        return out;
    }
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        out.push_back(trim(item));
    }
    return out;
}

inline std::string format_value(int v) { return std::to_string(v); }
inline std::string format_value(std::uint64_t v) { return std::to_string(v); }
inline std::string format_value(bool v) { return v ? "true" : "false"; }
inline std::string format_value(const std::string& v) { return v; }
inline std::string format_value(Reduction v) { return to_string(v); }

inline std::string format_value(double v) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

template <class E>
std::string format_value(const std::vector<E>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        s += (i ? ", " : "") + format_value(v[i]);
    }
    return s;
}

template <class V>
V parse_value(const std::string& text) {
    if constexpr (std::is_same_v<V, bool>) {
        if (text == "true") {
            return true;
        }
        if (text == "false") {
            return false;
        }
        throw ConfigError("expected true or false, got '" + text + "'");
    } else if constexpr (std::is_same_v<V, std::string>) {
        return text;
    } else if constexpr (std::is_same_v<V, Reduction>) {
        return parse_reduction(text);
    } else if constexpr (std::is_same_v<V, std::vector<int>> || std::is_same_v<V, std::vector<double>>) {
        V out;
        for (const auto& item : split_list(text)) {
            out.push_back(parse_number<typename V::value_type>(item));
        }
        return out;
    } else {
        return parse_number<V>(text);
    }
}

struct ConfigField {
    std::string section;
    std::string key;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

template <class Access>
ConfigField field(std::string section, std::string key, Access acc) {
    using V = std::remove_cvref_t<decltype(acc(std::declval<RunConfig&>()))>;
    return {std::move(section), std::move(key),
            [acc](const RunConfig& c) { return format_value(acc(const_cast<RunConfig&>(c))); },
            [acc](RunConfig& c, const std::string& v) { acc(c) = parse_value<V>(v); }};
}

#define NUCSSL_FIELD(sec, key, expr) field(sec, key, [](RunConfig& c) -> auto& { return c.expr; })

inline const std::vector<ConfigField>& config_fields() {
    static const std::vector<ConfigField> fields = {
        NUCSSL_FIELD("data", "root", data.root),
        NUCSSL_FIELD("data", "split_ratio", data.split_ratio),
        NUCSSL_FIELD("data", "seed", data.seed),

        NUCSSL_FIELD("sampler", "crop_size", pretrain.sampler.crop_size),
        NUCSSL_FIELD("sampler", "scale_pool", pretrain.sampler.scale_pool),
        NUCSSL_FIELD("sampler", "min_shift", pretrain.sampler.min_shift),
        NUCSSL_FIELD("sampler", "max_shift", pretrain.sampler.max_shift),

        NUCSSL_FIELD("encoder", "architecture", pretrain.encoder.architecture),
        NUCSSL_FIELD("encoder", "input_size", pretrain.encoder.input_size),
        NUCSSL_FIELD("encoder", "embedding_dim", pretrain.encoder.embedding_dim),
        NUCSSL_FIELD("encoder", "width", pretrain.encoder.width),
        NUCSSL_FIELD("encoder", "init_seed", pretrain.encoder.init_seed),

        NUCSSL_FIELD("loss", "m1", pretrain.loss.m1),
        NUCSSL_FIELD("loss", "m2", pretrain.loss.m2),
        NUCSSL_FIELD("loss", "reduce", pretrain.loss.reduce),

        NUCSSL_FIELD("pretrain", "steps", pretrain.steps),
        NUCSSL_FIELD("pretrain", "batch_size", pretrain.batch_size),
        NUCSSL_FIELD("pretrain", "optimizer", pretrain.optimizer.name),
        NUCSSL_FIELD("pretrain", "learning_rate", pretrain.optimizer.learning_rate),
        NUCSSL_FIELD("pretrain", "seed", pretrain.seed),
        NUCSSL_FIELD("pretrain", "log_every", pretrain.log_every),
        NUCSSL_FIELD("pretrain", "checkpoint_every", pretrain.checkpoint_every),
        NUCSSL_FIELD("pretrain", "heldout_pool_size", pretrain.heldout_pool_size),
        NUCSSL_FIELD("pretrain", "heldout_seed", pretrain.heldout_seed),
        NUCSSL_FIELD("pretrain", "fixed_sampling", pretrain.fixed_sampling),
        NUCSSL_FIELD("pretrain", "use_triplet", pretrain.terms.use_triplet),
        NUCSSL_FIELD("pretrain", "use_ranking", pretrain.terms.use_ranking),

        NUCSSL_FIELD("segmenter", "decoder", segmenter.decoder),
        NUCSSL_FIELD("segmenter", "init_seed", segmenter.init_seed),
        NUCSSL_FIELD("segmenter", "boundary_width", segmenter.boundary_width),

        NUCSSL_FIELD("finetune", "epochs", finetune.epochs),
        NUCSSL_FIELD("finetune", "batch_size", finetune.batch_size),
        NUCSSL_FIELD("finetune", "crops_per_image", finetune.crops_per_image),
        NUCSSL_FIELD("finetune", "optimizer", finetune.optimizer.name),
        NUCSSL_FIELD("finetune", "learning_rate", finetune.optimizer.learning_rate),
        NUCSSL_FIELD("finetune", "crop_size", finetune.crop_size),
        NUCSSL_FIELD("finetune", "label_fraction", finetune.label_fraction),
        NUCSSL_FIELD("finetune", "seed", finetune.seed),
        NUCSSL_FIELD("finetune", "freeze_encoder", finetune.freeze_encoder),
        NUCSSL_FIELD("finetune", "augment", finetune.augment),
        NUCSSL_FIELD("finetune", "class_weights", finetune.class_weights),

        NUCSSL_FIELD("postprocess", "min_instance_area", postprocess.min_instance_area),
        NUCSSL_FIELD("postprocess", "recover_boundary", postprocess.recover_boundary),
        NUCSSL_FIELD("postprocess", "connectivity", postprocess.connectivity),

        NUCSSL_FIELD("synth", "image_size", synth.image_size),
        NUCSSL_FIELD("synth", "count_min", synth.count_min),
        NUCSSL_FIELD("synth", "count_max", synth.count_max),
        NUCSSL_FIELD("synth", "radius_min", synth.radius_min),
        NUCSSL_FIELD("synth", "radius_max", synth.radius_max),
        NUCSSL_FIELD("synth", "overlap_allowed", synth.overlap_allowed),
        NUCSSL_FIELD("synth", "min_gap", synth.min_gap),
        NUCSSL_FIELD("synth", "texture_noise_sd", synth.texture_noise_sd),
        NUCSSL_FIELD("synth", "seed", synth.seed),
        NUCSSL_FIELD("synth", "num_images", synth.num_images),
        NUCSSL_FIELD("synth", "num_test_images", synth.num_test_images),
    };
    return fields;
}

#undef NUCSSL_FIELD

} // namespace detail

// Fields not mentioned keep their defaults. The result is validated.
inline RunConfig parse_config(const std::string& text) {
    RunConfig cfg;
    const auto& fields = detail::config_fields();
    std::set<std::string> sections;
    for (const auto& f : fields) {
        sections.insert(f.section);
    }
    std::set<std::string> seen;
    std::string section;
    std::istringstream in(text);
    std::string raw;
    int lineno = 0;
    while (std::getline(in, raw)) {
        ++lineno;
        const std::string line = detail::trim(raw);
        const auto where = [&] { return "config line " + std::to_string(lineno) + ": "; };
        if (line.empty() || line[0] == '#' || line[0] == ';') {
            continue;
        }
        if (line.front() == '[') {
            if (line.back() != ']') {
                throw ConfigError(where() + "malformed section header '" + line + "'");
            }
            section = detail::trim(line.substr(1, line.size() - 2));
            if (!sections.count(section)) {
                throw ConfigError(where() + "unknown section [" + section + "]");
            }
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(where() + "expected 'key = value', got '" + line + "'");
        }
        if (section.empty()) {
            throw ConfigError(where() + "key outside of any section");
        }
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        const auto it = std::find_if(fields.begin(), fields.end(),
                                     [&](const detail::ConfigField& f) { return f.section == section && f.key == key; });
        if (it == fields.end()) {
            throw ConfigError(where() + "unknown key '" + key + "' in [" + section + "]");
        }
        if (!seen.insert(section + "." + key).second) {
            throw ConfigError(where() + "duplicate key '" + section + "." + key + "'");
        }
        try {
            it->set(cfg, value);
        } catch (const ConfigError& e) {
            throw ConfigError(where() + section + "." + key + ": " + e.what());
        }
    }
    cfg.validate();
    return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot read config '" + path.string() + "'");
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

inline std::string dump_config(const RunConfig& cfg) {
    std::string out;
    std::string section;
    for (const auto& f : detail::config_fields()) {
        if (f.section != section) {
            out += (section.empty() ? "[" : "\n[") + f.section + "]\n";
            section = f.section;
        }
        const std::string v = f.get(cfg);
        out += f.key + (v.empty() ? " =\n" : " = " + v + "\n");
    }
    return out;
}

} // namespace nucssl
