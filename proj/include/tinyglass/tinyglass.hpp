// SPDX-License-Identifier: Apache-2.0
//
// Umbrella header.
#pragma once

#include "tinyglass/error.hpp"
#include "tinyglass/tensor.hpp"
#include "tinyglass/rng.hpp"
#include "tinyglass/parallel.hpp"
#include "tinyglass/tgw.hpp"
#include "tinyglass/backbone.hpp"
#include "tinyglass/embedder.hpp"
#include "tinyglass/sample.hpp"
#include "tinyglass/synthesis.hpp"
#include "tinyglass/head.hpp"
#include "tinyglass/model.hpp"
#include "tinyglass/graph.hpp"
#include "tinyglass/quantizer.hpp"
#include "tinyglass/profiler.hpp"
#include "tinyglass/image_io.hpp"
#include "tinyglass/data.hpp"
#include "tinyglass/evaluator.hpp"
#include "tinyglass/trainer.hpp"
#include "tinyglass/config.hpp"
