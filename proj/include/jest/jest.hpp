#pragma once

#include "jest/contrastive.hpp"
#include "jest/core/binary_io.hpp"
#include "jest/core/errors.hpp"
#include "jest/core/matrix.hpp"
#include "jest/core/rng.hpp"
#include "jest/flop_model.hpp"
#include "jest/harness/config.hpp"
#include "jest/harness/csv.hpp"
#include "jest/harness/experiment.hpp"
#include "jest/harness/plot.hpp"
#include "jest/harness/sample_bench.hpp"
#include "jest/harness/synthetic.hpp"
#include "jest/sampler.hpp"
#include "jest/scoring.hpp"
#include "jest/trainer.hpp"
