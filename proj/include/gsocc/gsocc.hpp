#pragma once

// Umbrella header: graph-attention refinement of 3D Gaussian scenes with a
// Gaussian-to-voxel semantic occupancy head.

#include "gsocc/ablation.hpp"
#include "gsocc/attention.hpp"
#include "gsocc/autodiff.hpp"
#include "gsocc/core.hpp"
#include "gsocc/dsdga.hpp"
#include "gsocc/errors.hpp"
#include "gsocc/fusion.hpp"
#include "gsocc/graph.hpp"
#include "gsocc/io.hpp"
#include "gsocc/optim.hpp"
#include "gsocc/parallel.hpp"
#include "gsocc/pipeline.hpp"
#include "gsocc/report.hpp"
#include "gsocc/rng.hpp"
#include "gsocc/scene.hpp"
#include "gsocc/splat.hpp"
