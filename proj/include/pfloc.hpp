#pragma once

// Umbrella header: multi-sensor TDOA source localization with belief
// propagation data association over particle-flow-updated Gaussian mixtures.

#include "pfloc/association.hpp"
#include "pfloc/config.hpp"
#include "pfloc/errors.hpp"
#include "pfloc/experiment.hpp"
#include "pfloc/flow.hpp"
#include "pfloc/gaussian.hpp"
#include "pfloc/geometry.hpp"
#include "pfloc/gmm.hpp"
#include "pfloc/model.hpp"
#include "pfloc/ospa.hpp"
#include "pfloc/pipeline.hpp"
#include "pfloc/rng.hpp"
#include "pfloc/sim.hpp"
