// Copyright 2026 The UMKD Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Whole library. Image-folder ingestion is compiled in only when linking umkd::image_io.
#include "umkd/align_losses.hpp"
#include "umkd/backbone.hpp"
#include "umkd/baselines.hpp"
#include "umkd/cfa.hpp"
#include "umkd/checkpoint.hpp"
#include "umkd/datasets.hpp"
#include "umkd/error.hpp"
#include "umkd/experiment.hpp"
#include "umkd/gradcheck.hpp"
#include "umkd/gradcheck_cases.hpp"
#include "umkd/metrics.hpp"
#include "umkd/ops.hpp"
#include "umkd/optim.hpp"
#include "umkd/sfa.hpp"
#include "umkd/tensor.hpp"
#include "umkd/trainer.hpp"
#include "umkd/udd.hpp"
