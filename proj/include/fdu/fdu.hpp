#pragma once

// Umbrella header for the federated domain unlearning toolkit.

#include "fdu/archive.hpp"
#include "fdu/data.hpp"
#include "fdu/fedsim.hpp"
#include "fdu/metrics.hpp"
#include "fdu/mia.hpp"
#include "fdu/model.hpp"
#include "fdu/nn_ops.hpp"
#include "fdu/repanalysis.hpp"
#include "fdu/rng.hpp"
#include "fdu/rundir.hpp"
#include "fdu/svg.hpp"
#include "fdu/tensor.hpp"
#include "fdu/unlearn.hpp"
#include "fdu/verifier.hpp"
