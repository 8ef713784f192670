#pragma once

// Everything except the CLI, which pulls in CLI11.
#include "dacnet/approximator.hpp"
#include "dacnet/complexity.hpp"
#include "dacnet/datasets.hpp"
#include "dacnet/equivalence.hpp"
#include "dacnet/error.hpp"
#include "dacnet/graph.hpp"
#include "dacnet/layers.hpp"
#include "dacnet/network.hpp"
#include "dacnet/ops.hpp"
#include "dacnet/parallel.hpp"
#include "dacnet/resnet.hpp"
#include "dacnet/serialize.hpp"
#include "dacnet/stats.hpp"
#include "dacnet/tensor.hpp"
#include "dacnet/training.hpp"
