#pragma once

#include "fbsde/errors.hpp"
#include "fbsde/model.hpp"
#include "fbsde/rng.hpp"
#include "fbsde/parallel.hpp"
#include "fbsde/sde_sim.hpp"
#include "fbsde/pde_backward.hpp"
#include "fbsde/kalman.hpp"
#include "fbsde/particle.hpp"
#include "fbsde/estimators.hpp"
#include "fbsde/control.hpp"
#include "fbsde/config.hpp"
#include "fbsde/io.hpp"

namespace fbsde {
inline constexpr const char* kVersion = "0.1.0";
}
