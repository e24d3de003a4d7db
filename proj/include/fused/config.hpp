/*
 * Copyright 2026 FUSED Toolkit Contributors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fused/hash.hpp"
#include "fused/objectives.hpp"
#include "fused/optimizer.hpp"
#include "fused/preprocess.hpp"

namespace fused {

enum class PseudoLabelVariant { Fused, FmProto, FmLinear, SmProto, SmLinear };
enum class EmaCadence { Batch, Epoch };
enum class MiScope { Batch, Dataset };

inline const char* pseudo_label_variant_name(PseudoLabelVariant v) {
    switch (v) {
        case PseudoLabelVariant::Fused: return "fused";
        case PseudoLabelVariant::FmProto: return "fm_proto";
        case PseudoLabelVariant::FmLinear: return "fm_linear";
        case PseudoLabelVariant::SmProto: return "sm_proto";
        default: return "sm_linear";
    }
}

// Every hyperparameter, toggle, and seed governing one adaptation run.
struct AdaptationConfig {
    // optimization
    int epochs = 50;
    int batch_size = 32;
    double lr0 = 1e-4;
    double fm_lr0 = -1.0;  // negative = inherit lr0
    double sm_lr0 = -1.0;
    double decay_power = 0.75;
    LrSchedule lr_schedule = LrSchedule::InvPower;
    int pretrain_epochs = 50;
    double pretrain_lr0 = -1.0;

    // prototype bank
    double momentum = 0.9;          // mu
    double margin_threshold = 0.6;  // eta
    double temperature = 10.0;      // tau
    EmaCadence ema_cadence = EmaCadence::Batch;
    bool ema_update_fm_during_adapt = true;

    // losses
    LossWeights weights;
    MiScope mi_scope = MiScope::Batch;
    bool kd_detach_teacher = true;

    // toggles mirroring the ablation grid
    bool use_consensus_mask = true;
    bool use_mi = true;
    bool use_kd = true;
    bool use_ce = true;
    bool use_div = true;
    PseudoLabelVariant pseudo_label_variant = PseudoLabelVariant::Fused;

    uint64_t seed = 0;

    // toy encoder sizes
    int fm_hidden1 = 128, fm_hidden2 = 128, fm_feature_dim = 200;
    int sm_filters = 6, sm_kernel = 13, sm_pool = 8, sm_feature_dim = 128;

    // test plumbing, deliberately not reachable from config files: replaces
    // refined pseudo-labels with ground truth to measure the CE path alone
    bool inject_oracle_labels = false;

    double effective_fm_lr0() const { return fm_lr0 > 0.0 ? fm_lr0 : lr0; }
    double effective_sm_lr0() const { return sm_lr0 > 0.0 ? sm_lr0 : lr0; }
    double effective_pretrain_lr0() const { return pretrain_lr0 > 0.0 ? pretrain_lr0 : lr0; }
};

inline void validate_adaptation_config(const AdaptationConfig& c) {
    auto fail = [](const std::string& key, const std::string& why) {
        throw std::invalid_argument("config: " + key + " " + why);
    };
    if (c.epochs < 1) fail("adapt.epochs", "must be >= 1");
    if (c.batch_size < 1) fail("adapt.batch_size", "must be >= 1");
    if (!(c.lr0 > 0.0)) fail("adapt.lr0", "must be positive");
    if (!(c.decay_power >= 0.0)) fail("adapt.decay_power", "must be nonnegative");
    if (c.pretrain_epochs < 0) fail("pretrain.epochs", "must be >= 0");
    if (!(c.momentum > 0.0 && c.momentum < 1.0)) fail("proto.momentum", "must be in (0,1)");
    if (!(c.margin_threshold >= 0.0 && c.margin_threshold < 1.0))
        fail("proto.margin_threshold", "must be in [0,1)");
    if (!(c.temperature > 0.0)) fail("proto.temperature", "must be positive");
    if (!(c.weights.lambda_kd >= 0.0) || !std::isfinite(c.weights.lambda_kd))
        fail("loss.lambda_kd", "must be finite and nonnegative");
    if (!(c.weights.lambda_div >= 0.0) || !std::isfinite(c.weights.lambda_div))
        fail("loss.lambda_div", "must be finite and nonnegative");
    if (c.fm_hidden1 < 1 || c.fm_hidden2 < 1 || c.fm_feature_dim < 1)
        fail("fm.*", "encoder dims must be positive");
    if (c.sm_filters < 1 || c.sm_kernel < 1 || c.sm_pool < 1 || c.sm_feature_dim < 1)
        fail("sm.*", "encoder dims must be positive");
}

// How the experiment obtains its cohort.
struct DataSpec {
    std::string path;  // empty = generate
    int subjects = 8, trials_per_class = 24, channels = 8, timepoints = 256, classes = 4;
    double severity = 0.5, jitter = 0.1, noise = 1.0;
    double rate = 128.0;
    uint64_t seed = 7;
    std::string preprocess_ops;  // optional pipeline string
};

struct GridEntry {
    std::string name;
    std::vector<std::pair<std::string, std::string>> overrides;
};

struct ExperimentSpec {
    DataSpec data;
    std::string split_scheme = "loso";
    int group_size = 10;
    AdaptationConfig base;
    std::vector<GridEntry> grid;
    std::vector<uint64_t> seeds = {0};
    std::string output_dir = "out";
    int jobs = 0;  // 0 = hardware concurrency
};

namespace cfgdetail {

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw std::invalid_argument("config: " + key + " expects true/false, got '" + v + "'");
}

inline long parse_int(const std::string& key, const std::string& v) {
    try {
        size_t used = 0;
        long x = std::stol(v, &used);
        if (used != v.size()) throw std::invalid_argument("");
        return x;
    } catch (...) {
        throw std::invalid_argument("config: " + key + " expects an integer, got '" + v + "'");
    }
}

inline double parse_real(const std::string& key, const std::string& v) {
    try {
        size_t used = 0;
        double x = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument("");
        return x;
    } catch (...) {
        throw std::invalid_argument("config: " + key + " expects a number, got '" + v + "'");
    }
}

inline uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        size_t used = 0;
        unsigned long long x = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument("");
        return x;
    } catch (...) {
        throw std::invalid_argument("config: " + key + " expects an unsigned integer, got '" + v + "'");
    }
}

}  // namespace cfgdetail

// Applies one adaptation-scoped key. Grid overrides reuse this path.
inline void apply_adaptation_key(AdaptationConfig& c, const std::string& key, const std::string& v) {
    using namespace cfgdetail;
    if (key == "adapt.epochs") c.epochs = static_cast<int>(parse_int(key, v));
    else if (key == "adapt.batch_size") c.batch_size = static_cast<int>(parse_int(key, v));
    else if (key == "adapt.lr0") c.lr0 = parse_real(key, v);
    else if (key == "adapt.fm_lr0") c.fm_lr0 = parse_real(key, v);
    else if (key == "adapt.sm_lr0") c.sm_lr0 = parse_real(key, v);
    else if (key == "adapt.decay_power") c.decay_power = parse_real(key, v);
    else if (key == "adapt.lr_schedule") {
        if (v == "inv_power") c.lr_schedule = LrSchedule::InvPower;
        else if (v == "exp") c.lr_schedule = LrSchedule::Exponential;
        else throw std::invalid_argument("config: adapt.lr_schedule expects inv_power|exp, got '" + v + "'");
    } else if (key == "pretrain.epochs") c.pretrain_epochs = static_cast<int>(parse_int(key, v));
    else if (key == "pretrain.lr0") c.pretrain_lr0 = parse_real(key, v);
    else if (key == "proto.momentum") c.momentum = parse_real(key, v);
    else if (key == "proto.margin_threshold") c.margin_threshold = parse_real(key, v);
    else if (key == "proto.temperature") c.temperature = parse_real(key, v);
    else if (key == "proto.ema_cadence") {
        if (v == "batch") c.ema_cadence = EmaCadence::Batch;
        else if (v == "epoch") c.ema_cadence = EmaCadence::Epoch;
        else throw std::invalid_argument("config: proto.ema_cadence expects batch|epoch, got '" + v + "'");
    } else if (key == "proto.update_fm_during_adapt") c.ema_update_fm_during_adapt = parse_bool(key, v);
    else if (key == "loss.lambda_kd") c.weights.lambda_kd = parse_real(key, v);
    else if (key == "loss.lambda_div") c.weights.lambda_div = parse_real(key, v);
    else if (key == "loss.mi_scope") {
        if (v == "batch") c.mi_scope = MiScope::Batch;
        else if (v == "dataset") c.mi_scope = MiScope::Dataset;
        else throw std::invalid_argument("config: loss.mi_scope expects batch|dataset, got '" + v + "'");
    } else if (key == "loss.kd_detach_teacher") c.kd_detach_teacher = parse_bool(key, v);
    else if (key == "toggle.use_consensus_mask") c.use_consensus_mask = parse_bool(key, v);
    else if (key == "toggle.use_mi") c.use_mi = parse_bool(key, v);
    else if (key == "toggle.use_kd") c.use_kd = parse_bool(key, v);
    else if (key == "toggle.use_ce") c.use_ce = parse_bool(key, v);
    else if (key == "toggle.use_div") c.use_div = parse_bool(key, v);
    else if (key == "toggle.pseudo_label_variant") {
        if (v == "fused") c.pseudo_label_variant = PseudoLabelVariant::Fused;
        else if (v == "fm_proto") c.pseudo_label_variant = PseudoLabelVariant::FmProto;
        else if (v == "fm_linear") c.pseudo_label_variant = PseudoLabelVariant::FmLinear;
        else if (v == "sm_proto") c.pseudo_label_variant = PseudoLabelVariant::SmProto;
        else if (v == "sm_linear") c.pseudo_label_variant = PseudoLabelVariant::SmLinear;
        else
            throw std::invalid_argument(
                "config: toggle.pseudo_label_variant expects fused|fm_proto|fm_linear|sm_proto|sm_linear, got '" +
                v + "'");
    } else if (key == "run.seed") c.seed = parse_u64(key, v);
    else if (key == "fm.hidden1") c.fm_hidden1 = static_cast<int>(parse_int(key, v));
    else if (key == "fm.hidden2") c.fm_hidden2 = static_cast<int>(parse_int(key, v));
    else if (key == "fm.feature_dim") c.fm_feature_dim = static_cast<int>(parse_int(key, v));
    else if (key == "sm.filters") c.sm_filters = static_cast<int>(parse_int(key, v));
    else if (key == "sm.kernel") c.sm_kernel = static_cast<int>(parse_int(key, v));
    else if (key == "sm.pool") c.sm_pool = static_cast<int>(parse_int(key, v));
    else if (key == "sm.feature_dim") c.sm_feature_dim = static_cast<int>(parse_int(key, v));
    else throw std::invalid_argument("config: unknown key '" + key + "'");
}

inline void apply_experiment_key(ExperimentSpec& s, const std::string& key, const std::string& v) {
    using namespace cfgdetail;
    if (key == "data.path") s.data.path = v;
    else if (key == "data.subjects") s.data.subjects = static_cast<int>(parse_int(key, v));
    else if (key == "data.trials_per_class") s.data.trials_per_class = static_cast<int>(parse_int(key, v));
    else if (key == "data.channels") s.data.channels = static_cast<int>(parse_int(key, v));
    else if (key == "data.timepoints") s.data.timepoints = static_cast<int>(parse_int(key, v));
    else if (key == "data.classes") s.data.classes = static_cast<int>(parse_int(key, v));
    else if (key == "data.severity") s.data.severity = parse_real(key, v);
    else if (key == "data.jitter") s.data.jitter = parse_real(key, v);
    else if (key == "data.noise") s.data.noise = parse_real(key, v);
    else if (key == "data.rate") s.data.rate = parse_real(key, v);
    else if (key == "data.seed") s.data.seed = parse_u64(key, v);
    else if (key == "data.preprocess") s.data.preprocess_ops = v;
    else if (key == "split.scheme") {
        if (v != "loso" && v != "logo")
            throw std::invalid_argument("config: split.scheme expects loso|logo, got '" + v + "'");
        s.split_scheme = v;
    } else if (key == "split.group_size") s.group_size = static_cast<int>(parse_int(key, v));
    else if (key == "exp.output_dir") s.output_dir = v;
    else if (key == "exp.jobs") s.jobs = static_cast<int>(parse_int(key, v));
    else if (key == "exp.seeds") {
        s.seeds.clear();
        std::stringstream ss(v);
        std::string item;
        while (std::getline(ss, item, ',')) {
            if (item.empty()) continue;
            s.seeds.push_back(parse_u64(key, item));
        }
        if (s.seeds.empty()) throw std::invalid_argument("config: exp.seeds expects at least one seed");
    } else if (key.rfind("grid.", 0) == 0) {
        GridEntry e;
        e.name = key.substr(5);
        if (e.name.empty()) throw std::invalid_argument("config: grid entry needs a name");
        if (!v.empty()) {
            std::stringstream ss(v);
            std::string item;
            while (std::getline(ss, item, ';')) {
                if (item.empty()) continue;
                const auto eq = item.find('=');
                if (eq == std::string::npos)
                    throw std::invalid_argument("config: grid override '" + item + "' is not key=value");
                e.overrides.emplace_back(item.substr(0, eq), item.substr(eq + 1));
            }
        }
        s.grid.push_back(std::move(e));
    } else {
        apply_adaptation_key(s.base, key, v);
    }
}

inline void validate_experiment_spec(const ExperimentSpec& s) {
    validate_adaptation_config(s.base);
    if (s.data.path.empty()) {
        if (s.data.subjects < 2) throw std::invalid_argument("config: data.subjects must be >= 2");
        if (s.data.trials_per_class < 1)
            throw std::invalid_argument("config: data.trials_per_class must be >= 1");
        if (s.data.classes < 2) throw std::invalid_argument("config: data.classes must be >= 2");
        if (s.data.channels < 1 || s.data.timepoints < 1)
            throw std::invalid_argument("config: data dims must be positive");
    }
    if (s.group_size < 1) throw std::invalid_argument("config: split.group_size must be >= 1");
    if (s.jobs < 0) throw std::invalid_argument("config: exp.jobs must be >= 0");
    // grid overrides must themselves resolve to valid configs
    for (const auto& e : s.grid) {
        AdaptationConfig c = s.base;
        for (const auto& [k, v] : e.overrides) apply_adaptation_key(c, k, v);
        validate_adaptation_config(c);
    }
    if (!s.data.preprocess_ops.empty()) parse_pipeline(s.data.preprocess_ops);
}

// Flat key=value text, '#' comments, strict unknown-key rejection.
inline ExperimentSpec parse_config_text(const std::string& text) {
    ExperimentSpec spec;
    std::stringstream ss(text);
    std::string line;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) line.pop_back();
        size_t start = 0;
        while (start < line.size() && std::isspace(static_cast<unsigned char>(line[start]))) ++start;
        line.erase(0, start);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config: line " + std::to_string(lineno) + " is not key=value: '" +
                                        line + "'");
        std::string key = line.substr(0, eq);
        std::string value = line.substr(eq + 1);
        while (!key.empty() && std::isspace(static_cast<unsigned char>(key.back()))) key.pop_back();
        size_t vs = 0;
        while (vs < value.size() && std::isspace(static_cast<unsigned char>(value[vs]))) ++vs;
        value.erase(0, vs);
        apply_experiment_key(spec, key, value);
    }
    validate_experiment_spec(spec);
    return spec;
}

inline ExperimentSpec parse_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("config: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse_config_text(text);
}

// Canonical serialized form: sorted keys, every field explicit. parse(echo(s))
// reproduces s, and the adaptation section is what gets hashed into reports.
inline std::string adaptation_config_text(const AdaptationConfig& c) {
    std::map<std::string, std::string> kv;
    kv["adapt.epochs"] = std::to_string(c.epochs);
    kv["adapt.batch_size"] = std::to_string(c.batch_size);
    kv["adapt.lr0"] = fmt_double(c.lr0);
    kv["adapt.fm_lr0"] = fmt_double(c.fm_lr0);
    kv["adapt.sm_lr0"] = fmt_double(c.sm_lr0);
    kv["adapt.decay_power"] = fmt_double(c.decay_power);
    kv["adapt.lr_schedule"] = c.lr_schedule == LrSchedule::InvPower ? "inv_power" : "exp";
    kv["pretrain.epochs"] = std::to_string(c.pretrain_epochs);
    kv["pretrain.lr0"] = fmt_double(c.pretrain_lr0);
    kv["proto.momentum"] = fmt_double(c.momentum);
    kv["proto.margin_threshold"] = fmt_double(c.margin_threshold);
    kv["proto.temperature"] = fmt_double(c.temperature);
    kv["proto.ema_cadence"] = c.ema_cadence == EmaCadence::Batch ? "batch" : "epoch";
    kv["proto.update_fm_during_adapt"] = c.ema_update_fm_during_adapt ? "true" : "false";
    kv["loss.lambda_kd"] = fmt_double(c.weights.lambda_kd);
    kv["loss.lambda_div"] = fmt_double(c.weights.lambda_div);
    kv["loss.mi_scope"] = c.mi_scope == MiScope::Batch ? "batch" : "dataset";
    kv["loss.kd_detach_teacher"] = c.kd_detach_teacher ? "true" : "false";
    kv["toggle.use_consensus_mask"] = c.use_consensus_mask ? "true" : "false";
    kv["toggle.use_mi"] = c.use_mi ? "true" : "false";
    kv["toggle.use_kd"] = c.use_kd ? "true" : "false";
    kv["toggle.use_ce"] = c.use_ce ? "true" : "false";
    kv["toggle.use_div"] = c.use_div ? "true" : "false";
    kv["toggle.pseudo_label_variant"] = pseudo_label_variant_name(c.pseudo_label_variant);
    kv["run.seed"] = std::to_string(c.seed);
    kv["fm.hidden1"] = std::to_string(c.fm_hidden1);
    kv["fm.hidden2"] = std::to_string(c.fm_hidden2);
    kv["fm.feature_dim"] = std::to_string(c.fm_feature_dim);
    kv["sm.filters"] = std::to_string(c.sm_filters);
    kv["sm.kernel"] = std::to_string(c.sm_kernel);
    kv["sm.pool"] = std::to_string(c.sm_pool);
    kv["sm.feature_dim"] = std::to_string(c.sm_feature_dim);
    std::string out;
    for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
    return out;
}

inline std::string config_hash(const AdaptationConfig& c) { return hash_string_hex(adaptation_config_text(c)); }

inline std::string experiment_spec_text(const ExperimentSpec& s) {
    std::map<std::string, std::string> kv;
    kv["data.path"] = s.data.path;
    kv["data.subjects"] = std::to_string(s.data.subjects);
    kv["data.trials_per_class"] = std::to_string(s.data.trials_per_class);
    kv["data.channels"] = std::to_string(s.data.channels);
    kv["data.timepoints"] = std::to_string(s.data.timepoints);
    kv["data.classes"] = std::to_string(s.data.classes);
    kv["data.severity"] = fmt_double(s.data.severity);
    kv["data.jitter"] = fmt_double(s.data.jitter);
    kv["data.noise"] = fmt_double(s.data.noise);
    kv["data.rate"] = fmt_double(s.data.rate);
    kv["data.seed"] = std::to_string(s.data.seed);
    kv["data.preprocess"] = s.data.preprocess_ops;
    kv["split.scheme"] = s.split_scheme;
    kv["split.group_size"] = std::to_string(s.group_size);
    kv["exp.output_dir"] = s.output_dir;
    kv["exp.jobs"] = std::to_string(s.jobs);
    std::string seeds;
    for (size_t i = 0; i < s.seeds.size(); ++i) seeds += (i ? "," : "") + std::to_string(s.seeds[i]);
    kv["exp.seeds"] = seeds;
    for (const auto& e : s.grid) {
        std::string ov;
        for (size_t i = 0; i < e.overrides.size(); ++i)
            ov += (i ? ";" : "") + e.overrides[i].first + "=" + e.overrides[i].second;
        kv["grid." + e.name] = ov;
    }
    std::string out = adaptation_config_text(s.base);
    for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
    return out;
}

inline AdaptationConfig resolve_grid_entry(const AdaptationConfig& base, const GridEntry& e) {
    AdaptationConfig c = base;
    for (const auto& [k, v] : e.overrides) apply_adaptation_key(c, k, v);
    validate_adaptation_config(c);
    return c;
}

}  // namespace fused
