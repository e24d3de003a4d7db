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

#include "fused/branch.hpp"
#include "fused/common.hpp"
#include "fused/config.hpp"
#include "fused/dataset.hpp"
#include "fused/engine.hpp"
#include "fused/experiment.hpp"
#include "fused/hash.hpp"
#include "fused/nn.hpp"
#include "fused/objectives.hpp"
#include "fused/optimizer.hpp"
#include "fused/preprocess.hpp"
#include "fused/prototypes.hpp"
#include "fused/pseudo_label.hpp"
#include "fused/report.hpp"
#include "fused/rng.hpp"
#include "fused/splits.hpp"
