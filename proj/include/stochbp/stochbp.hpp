// Copyright (c) 2026 The stochbp Authors
// SPDX-License-Identifier: Apache-2.0

// Umbrella header.

#pragma once

#include "stochbp/analysis/analysis.hpp"
#include "stochbp/autograd/gradcheck.hpp"
#include "stochbp/autograd/op_registry.hpp"
#include "stochbp/autograd/ops.hpp"
#include "stochbp/autograd/region.hpp"
#include "stochbp/autograd/tape.hpp"
#include "stochbp/errors.hpp"
#include "stochbp/harness/config.hpp"
#include "stochbp/harness/dataset.hpp"
#include "stochbp/harness/experiment.hpp"
#include "stochbp/kernels.hpp"
#include "stochbp/log.hpp"
#include "stochbp/models/common.hpp"
#include "stochbp/models/step.hpp"
#include "stochbp/models/stt.hpp"
#include "stochbp/models/transformer.hpp"
#include "stochbp/rng.hpp"
#include "stochbp/sample_mask.hpp"
#include "stochbp/sbp/samplers.hpp"
#include "stochbp/sbp/sbp.hpp"
#include "stochbp/tensor.hpp"
