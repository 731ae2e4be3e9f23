#pragma once

#include "polgrad/error.hpp"
#include "polgrad/random.hpp"
#include "polgrad/autodiff.hpp"
#include "polgrad/nn.hpp"
#include "polgrad/policy.hpp"
#include "polgrad/serialize.hpp"
#include "polgrad/env.hpp"
#include "polgrad/csv.hpp"
#include "polgrad/rollout.hpp"
#include "polgrad/optim.hpp"
#include "polgrad/steppers.hpp"
#include "polgrad/config.hpp"
#include "polgrad/diagnostics.hpp"
#include "polgrad/stats.hpp"
#include "polgrad/train.hpp"
#include "polgrad/experiment.hpp"
