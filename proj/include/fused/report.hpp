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

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

#include "fused/engine.hpp"

namespace fused {

// Canonical structured text: deterministic given the run, one section per
// epoch. Wall-clock lives in the timing sidecar, never here, so identical
// seeds yield identical bytes.
inline std::string run_report_text(const RunReport& r) {
    std::string out;
    out += "[run]\n";
    out += "config_hash=" + r.config_hash + "\n";
    out += "seed=" + std::to_string(r.seed) + "\n";
    out += "epochs=" + std::to_string(r.epochs.size()) + "\n";
    for (size_t e = 0; e < r.epochs.size(); ++e) {
        const auto& s = r.epochs[e];
        out += "[epoch " + std::to_string(e) + "]\n";
        out += "l_mi=" + fmt_double(s.l_mi) + "\n";
        out += "l_ce=" + fmt_double(s.l_ce) + "\n";
        out += "l_kd=" + fmt_double(s.l_kd) + "\n";
        out += "l_div=" + fmt_double(s.l_div) + "\n";
        out += "mask_rate=" + fmt_double(s.mask_rate) + "\n";
        out += "agreement_rate=" + fmt_double(s.agreement_rate) + "\n";
        out += "pseudo_acc=" + fmt_double(s.pseudo_acc) + "\n";
        out += "empty_ce_batches=" + std::to_string(s.empty_ce_batches) + "\n";
    }
    out += "[final]\n";
    out += "accuracy=" + fmt_double(r.final_accuracy) + "\n";
    out += "mask_rate=" + fmt_double(r.final_mask_rate) + "\n";
    out += "mean_pred_entropy=" + fmt_double(r.final_mean_pred_entropy) + "\n";
    out += "fm_checkpoint=" + r.fm_checkpoint_hash + "\n";
    out += "sm_checkpoint=" + r.sm_checkpoint_hash + "\n";
    out += "fm_bank=" + r.fm_bank_hash + "\n";
    out += "sm_bank=" + r.sm_bank_hash + "\n";
    out += "flagged_empty_batches=" + std::to_string(r.flagged_empty_batches) + "\n";
    return out;
}

inline std::string run_report_csv(const RunReport& r) {
    std::string out = "epoch,l_mi,l_ce,l_kd,l_div,mask_rate,agreement_rate,pseudo_acc,empty_ce_batches\n";
    for (size_t e = 0; e < r.epochs.size(); ++e) {
        const auto& s = r.epochs[e];
        out += std::to_string(e) + "," + fmt_double(s.l_mi) + "," + fmt_double(s.l_ce) + "," +
               fmt_double(s.l_kd) + "," + fmt_double(s.l_div) + "," + fmt_double(s.mask_rate) + "," +
               fmt_double(s.agreement_rate) + "," + fmt_double(s.pseudo_acc) + "," +
               std::to_string(s.empty_ce_batches) + "\n";
    }
    return out;
}

// Per-epoch loss trace in the documented column order.
inline std::string loss_trace_csv(const RunReport& r) {
    std::string out = "epoch,L_MI,L_CE,L_KD,L_Div,mask_rate\n";
    for (size_t e = 0; e < r.epochs.size(); ++e) {
        const auto& s = r.epochs[e];
        out += std::to_string(e) + "," + fmt_double(s.l_mi) + "," + fmt_double(s.l_ce) + "," +
               fmt_double(s.l_kd) + "," + fmt_double(s.l_div) + "," + fmt_double(s.mask_rate) + "\n";
    }
    return out;
}

// Pseudo-label diagnostics (agreement vs arbitration and, on synthetic runs,
// pseudo-label accuracy against stored ground truth).
inline std::string diagnostics_csv(const RunReport& r) {
    std::string out = "epoch,mask_rate,agreement_rate,arbitration_rate,pseudo_label_accuracy\n";
    for (size_t e = 0; e < r.epochs.size(); ++e) {
        const auto& s = r.epochs[e];
        out += std::to_string(e) + "," + fmt_double(s.mask_rate) + "," + fmt_double(s.agreement_rate) +
               "," + fmt_double(1.0 - s.agreement_rate) + "," + fmt_double(s.pseudo_acc) + "\n";
    }
    return out;
}

inline std::string timing_csv(const RunReport& r) {
    std::string out = "epoch,wall_ms\n";
    for (size_t e = 0; e < r.epochs.size(); ++e)
        out += std::to_string(e) + "," + fmt_double(r.epochs[e].wall_ms) + "\n";
    return out;
}

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path + " for writing");
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!f) throw std::runtime_error("write failed for " + path);
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

// Parses the canonical report text back; used by the result-table cross-check.
inline RunReport parse_run_report_text(const std::string& text) {
    RunReport r;
    std::stringstream ss(text);
    std::string line;
    EpochStats cur;
    bool in_epoch = false;
    auto flush_epoch = [&]() {
        if (in_epoch) r.epochs.push_back(cur);
        cur = EpochStats{};
        in_epoch = false;
    };
    while (std::getline(ss, line)) {
        if (line.empty()) continue;
        if (line.front() == '[') {
            flush_epoch();
            if (line.rfind("[epoch", 0) == 0) in_epoch = true;
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw std::runtime_error("report: malformed line '" + line + "'");
        const std::string key = line.substr(0, eq);
        const std::string val = line.substr(eq + 1);
        if (in_epoch) {
            if (key == "l_mi") cur.l_mi = std::stod(val);
            else if (key == "l_ce") cur.l_ce = std::stod(val);
            else if (key == "l_kd") cur.l_kd = std::stod(val);
            else if (key == "l_div") cur.l_div = std::stod(val);
            else if (key == "mask_rate") cur.mask_rate = std::stod(val);
            else if (key == "agreement_rate") cur.agreement_rate = std::stod(val);
            else if (key == "pseudo_acc") cur.pseudo_acc = std::stod(val);
            else if (key == "empty_ce_batches") cur.empty_ce_batches = std::stoi(val);
            else throw std::runtime_error("report: unknown epoch key '" + key + "'");
        } else {
            if (key == "config_hash") r.config_hash = val;
            else if (key == "seed") r.seed = std::stoull(val);
            else if (key == "epochs") { /* redundant count */ }
            else if (key == "accuracy") r.final_accuracy = std::stod(val);
            else if (key == "mask_rate") r.final_mask_rate = std::stod(val);
            else if (key == "mean_pred_entropy") r.final_mean_pred_entropy = std::stod(val);
            else if (key == "fm_checkpoint") r.fm_checkpoint_hash = val;
            else if (key == "sm_checkpoint") r.sm_checkpoint_hash = val;
            else if (key == "fm_bank") r.fm_bank_hash = val;
            else if (key == "sm_bank") r.sm_bank_hash = val;
            else if (key == "flagged_empty_batches") r.flagged_empty_batches = std::stoi(val);
            else throw std::runtime_error("report: unknown key '" + key + "'");
        }
    }
    flush_epoch();
    return r;
}

}  // namespace fused
