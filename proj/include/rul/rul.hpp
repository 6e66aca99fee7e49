#pragma once

#include "rul/autodiff.hpp"
#include "rul/corpus.hpp"
#include "rul/errors.hpp"
#include "rul/eval.hpp"
#include "rul/losses.hpp"
#include "rul/model.hpp"
#include "rul/rng.hpp"
#include "rul/training.hpp"
