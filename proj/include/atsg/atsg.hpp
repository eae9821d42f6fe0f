#pragma once

#include "atsg/checkpoint.hpp"
#include "atsg/dataset.hpp"
#include "atsg/errors.hpp"
#include "atsg/grad_check.hpp"
#include "atsg/harness.hpp"
#include "atsg/inference.hpp"
#include "atsg/log.hpp"
#include "atsg/losses.hpp"
#include "atsg/metrics.hpp"
#include "atsg/model.hpp"
#include "atsg/model_check.hpp"
#include "atsg/parallel.hpp"
#include "atsg/rng.hpp"
#include "atsg/stats.hpp"
#include "atsg/tensor.hpp"
#include "atsg/training.hpp"
#include "atsg/volume.hpp"
