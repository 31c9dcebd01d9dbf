#pragma once

#include "tssd/analysis.hpp"
#include "tssd/checkpoint.hpp"
#include "tssd/config.hpp"
#include "tssd/data.hpp"
#include "tssd/distill.hpp"
#include "tssd/error.hpp"
#include "tssd/gradcheck.hpp"
#include "tssd/kv.hpp"
#include "tssd/model.hpp"
#include "tssd/ops.hpp"
#include "tssd/params.hpp"
#include "tssd/rng.hpp"
#include "tssd/spiking.hpp"
#include "tssd/tape.hpp"
#include "tssd/tensor.hpp"
#include "tssd/train.hpp"
