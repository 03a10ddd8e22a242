#pragma once

#include "csireid/augmentation.hpp"
#include "csireid/batching.hpp"
#include "csireid/calibration.hpp"
#include "csireid/checkpoint.hpp"
#include "csireid/errors.hpp"
#include "csireid/io.hpp"
#include "csireid/log.hpp"
#include "csireid/losses.hpp"
#include "csireid/metrics.hpp"
#include "csireid/model.hpp"
#include "csireid/rng.hpp"
#include "csireid/synthgen.hpp"
#include "csireid/tensor.hpp"
#include "csireid/trainer.hpp"
#include "csireid/types.hpp"
