#pragma once

#include "dae/analysis.hpp"
#include "dae/approx.hpp"
#include "dae/config.hpp"
#include "dae/envs.hpp"
#include "dae/estimators.hpp"
#include "dae/experiment.hpp"
#include "dae/mdp.hpp"
#include "dae/mdp_io.hpp"
#include "dae/rng.hpp"
#include "dae/theorems.hpp"
#include "dae/training.hpp"
#include "dae/verify.hpp"
