#pragma once

// Convenience umbrella: the whole library.

#include "gradflow/coupling.hpp"
#include "gradflow/distributions.hpp"
#include "gradflow/experiments.hpp"
#include "gradflow/metrics.hpp"
#include "gradflow/mlp.hpp"
#include "gradflow/objectives.hpp"
#include "gradflow/oracle.hpp"
#include "gradflow/report.hpp"
#include "gradflow/rng.hpp"
#include "gradflow/samplers.hpp"
#include "gradflow/schedules.hpp"
#include "gradflow/serde.hpp"
#include "gradflow/types.hpp"
