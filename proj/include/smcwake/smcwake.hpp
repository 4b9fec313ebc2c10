#pragma once

#include "smcwake/numkit.hpp"
#include "smcwake/models.hpp"
#include "smcwake/encoder.hpp"
#include "smcwake/smc.hpp"
#include "smcwake/estimators.hpp"
#include "smcwake/trainers.hpp"
#include "smcwake/metrics.hpp"
#include "smcwake/harness/config.hpp"
#include "smcwake/harness/experiment.hpp"
#include "smcwake/harness/compare.hpp"
#include "smcwake/harness/recipes.hpp"
