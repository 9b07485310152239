#pragma once

// Convenience umbrella for the whole library.

#include "upgd/backprop.hpp"
#include "upgd/fastmath.hpp"
#include "upgd/harness.hpp"
#include "upgd/matrix.hpp"
#include "upgd/metrics.hpp"
#include "upgd/network.hpp"
#include "upgd/optim.hpp"
#include "upgd/rng.hpp"
#include "upgd/streams.hpp"
#include "upgd/utility.hpp"
