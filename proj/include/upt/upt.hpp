#pragma once

#include "upt/adapters.hpp"
#include "upt/archive.hpp"
#include "upt/attention.hpp"
#include "upt/cli.hpp"
#include "upt/config.hpp"
#include "upt/encoder.hpp"
#include "upt/error.hpp"
#include "upt/gradcheck.hpp"
#include "upt/metrics.hpp"
#include "upt/objective.hpp"
#include "upt/optim.hpp"
#include "upt/oracles.hpp"
#include "upt/report.hpp"
#include "upt/synthetic.hpp"
#include "upt/tensor.hpp"
#include "upt/training.hpp"
