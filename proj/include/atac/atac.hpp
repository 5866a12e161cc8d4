#pragma once

#include "checkpoint.hpp"
#include "config.hpp"
#include "data.hpp"
#include "evaluation.hpp"
#include "grad_check.hpp"
#include "image.hpp"
#include "loss.hpp"
#include "model.hpp"
#include "ops.hpp"
#include "rng.hpp"
#include "scoring.hpp"
#include "tensor.hpp"
#include "training.hpp"
