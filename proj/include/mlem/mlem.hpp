#pragma once

#include "mlem/adaptive_probs.hpp"
#include "mlem/bench.hpp"
#include "mlem/config.hpp"
#include "mlem/diffusion_toy.hpp"
#include "mlem/dual.hpp"
#include "mlem/em_solver.hpp"
#include "mlem/mlem_solver.hpp"
#include "mlem/random.hpp"
#include "mlem/schedule.hpp"
#include "mlem/sde_core.hpp"
#include "mlem/theory.hpp"
