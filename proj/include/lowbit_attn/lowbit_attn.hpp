// Copyright 2026 The lowbit-attn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "lowbit_attn/ablation.hpp"
#include "lowbit_attn/inference.hpp"
#include "lowbit_attn/matmul.hpp"
#include "lowbit_attn/metrics.hpp"
#include "lowbit_attn/numerics.hpp"
#include "lowbit_attn/parallel.hpp"
#include "lowbit_attn/quantizers.hpp"
#include "lowbit_attn/synthetic.hpp"
#include "lowbit_attn/tensor.hpp"
#include "lowbit_attn/tensor_io.hpp"
#include "lowbit_attn/training.hpp"
