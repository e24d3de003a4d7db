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
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fused/dataset.hpp"

namespace fused {

enum class SplitScheme { LOSO, LOGO };

struct Fold {
    std::vector<int32_t> target_subjects;
    std::vector<int32_t> source_subjects;
};

struct SplitPlan {
    std::vector<Fold> folds;
    SplitScheme scheme = SplitScheme::LOSO;
};

// One fold per subject; that subject is the target, the rest are the source.
inline SplitPlan loso_splits(const CohortDataset& cohort) {
    auto ids = cohort.subject_ids();
    if (ids.size() < 2) throw std::invalid_argument("loso_splits: need at least 2 subjects");
    SplitPlan plan;
    plan.scheme = SplitScheme::LOSO;
    for (int32_t target : ids) {
        Fold f;
        f.target_subjects = {target};
        for (int32_t s : ids)
            if (s != target) f.source_subjects.push_back(s);
        plan.folds.push_back(std::move(f));
    }
    return plan;
}

// Contiguous groups of group_size over sorted subject ids; a smaller final
// remainder group is allowed.
inline SplitPlan logo_splits(const CohortDataset& cohort, int group_size) {
    auto ids = cohort.subject_ids();
    if (ids.size() < 2) throw std::invalid_argument("logo_splits: need at least 2 subjects");
    if (group_size < 1) throw std::invalid_argument("logo_splits: group_size must be >= 1");
    if (static_cast<size_t>(group_size) >= ids.size())
        throw std::invalid_argument("logo_splits: fewer subjects than one group plus a source set");
    SplitPlan plan;
    plan.scheme = SplitScheme::LOGO;
    for (size_t start = 0; start < ids.size(); start += group_size) {
        Fold f;
        const size_t end = std::min(start + group_size, ids.size());
        f.target_subjects.assign(ids.begin() + start, ids.begin() + end);
        for (size_t i = 0; i < ids.size(); ++i)
            if (i < start || i >= end) f.source_subjects.push_back(ids[i]);
        plan.folds.push_back(std::move(f));
    }
    return plan;
}

// Partition sanity: disjoint within a fold, jointly covering, each subject a
// target exactly once.
inline void validate_split_plan(const SplitPlan& plan, const CohortDataset& cohort) {
    auto ids = cohort.subject_ids();
    std::vector<int32_t> seen_targets;
    for (const auto& f : plan.folds) {
        std::vector<int32_t> all = f.target_subjects;
        all.insert(all.end(), f.source_subjects.begin(), f.source_subjects.end());
        std::sort(all.begin(), all.end());
        if (all != ids) throw std::runtime_error("split plan: fold does not cover the cohort exactly");
        for (int32_t t : f.target_subjects) {
            for (int32_t s : f.source_subjects)
                if (s == t) throw std::runtime_error("split plan: subject on both sides of a fold");
            seen_targets.push_back(t);
        }
    }
    std::sort(seen_targets.begin(), seen_targets.end());
    if (seen_targets != ids) throw std::runtime_error("split plan: subjects are not targets exactly once");
}

inline void write_split_manifest(const SplitPlan& plan, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_split_manifest: cannot open " + path);
    f << "scheme=" << (plan.scheme == SplitScheme::LOSO ? "loso" : "logo") << "\n";
    for (size_t i = 0; i < plan.folds.size(); ++i) {
        f << "fold " << i << " targets:";
        for (int32_t t : plan.folds[i].target_subjects) f << " " << t;
        f << " sources:";
        for (int32_t s : plan.folds[i].source_subjects) f << " " << s;
        f << "\n";
    }
}

}  // namespace fused
