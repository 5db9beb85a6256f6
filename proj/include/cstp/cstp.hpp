#pragma once

#include "cstp/alignment.hpp"
#include "cstp/autodiff.hpp"
#include "cstp/backdoor.hpp"
#include "cstp/bench.hpp"
#include "cstp/causal_graph.hpp"
#include "cstp/cli.hpp"
#include "cstp/datagen.hpp"
#include "cstp/fusion.hpp"
#include "cstp/gradcheck.hpp"
#include "cstp/intervention.hpp"
#include "cstp/kv_config.hpp"
#include "cstp/layers.hpp"
#include "cstp/log.hpp"
#include "cstp/model.hpp"
#include "cstp/ops.hpp"
#include "cstp/pipeline.hpp"
#include "cstp/rng.hpp"
#include "cstp/sted.hpp"
#include "cstp/tensor.hpp"
