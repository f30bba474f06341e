#pragma once

#include "s2moe/tensor.hpp"
#include "s2moe/rng.hpp"
#include "s2moe/ops.hpp"
#include "s2moe/grad_check.hpp"
#include "s2moe/routing.hpp"
#include "s2moe/experts.hpp"
#include "s2moe/losses.hpp"
#include "s2moe/stochastic.hpp"
#include "s2moe/model.hpp"
#include "s2moe/optim.hpp"
#include "s2moe/diagnostics.hpp"
#include "s2moe/config.hpp"
#include "s2moe/corpus.hpp"
#include "s2moe/metrics.hpp"
#include "s2moe/checkpoint.hpp"
#include "s2moe/trainer.hpp"
