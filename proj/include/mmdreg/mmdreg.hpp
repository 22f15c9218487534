#pragma once

#include "mmdreg/errors.hpp"
#include "mmdreg/rng.hpp"
#include "mmdreg/normal_math.hpp"
#include "mmdreg/kernels.hpp"
#include "mmdreg/models.hpp"
#include "mmdreg/mmd_objective.hpp"
#include "mmdreg/stochastic_gradient.hpp"
#include "mmdreg/fit.hpp"
#include "mmdreg/contamination.hpp"
#include "mmdreg/bench.hpp"
#include "mmdreg/io.hpp"
