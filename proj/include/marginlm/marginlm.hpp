#pragma once

#include "marginlm/checkpoint.hpp"
#include "marginlm/corpus.hpp"
#include "marginlm/error.hpp"
#include "marginlm/margin_head.hpp"
#include "marginlm/model.hpp"
#include "marginlm/numerics.hpp"
#include "marginlm/rng.hpp"
#include "marginlm/run.hpp"
#include "marginlm/self_check.hpp"
#include "marginlm/toy_corpus.hpp"
#include "marginlm/training.hpp"
#include "marginlm/viz.hpp"
