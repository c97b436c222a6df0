#pragma once

#include "clan/attention.hpp"
#include "clan/backbone.hpp"
#include "clan/checkpoint.hpp"
#include "clan/cli.hpp"
#include "clan/config.hpp"
#include "clan/data.hpp"
#include "clan/gradcheck.hpp"
#include "clan/gradcheck_suite.hpp"
#include "clan/model.hpp"
#include "clan/ops.hpp"
#include "clan/rng.hpp"
#include "clan/tensor.hpp"
#include "clan/train.hpp"
#include "clan/viz.hpp"
