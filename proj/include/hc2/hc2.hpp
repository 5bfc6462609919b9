#pragma once

#include "hc2/adam.hpp"
#include "hc2/autodiff.hpp"
#include "hc2/data.hpp"
#include "hc2/error.hpp"
#include "hc2/gradcheck.hpp"
#include "hc2/loss_generalized.hpp"
#include "hc2/loss_individual.hpp"
#include "hc2/matrix.hpp"
#include "hc2/metrics.hpp"
#include "hc2/model.hpp"
#include "hc2/model_io.hpp"
#include "hc2/rng.hpp"
#include "hc2/sampling.hpp"
#include "hc2/trainer.hpp"
