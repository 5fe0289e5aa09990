#pragma once

#include "errors.hpp"
#include "matrix.hpp"
#include "vocab.hpp"
#include "expr.hpp"
#include "dataset.hpp"
#include "metrics.hpp"
#include "refine.hpp"
#include "policy.hpp"
#include "ngram.hpp"
#include "remote_policy.hpp"
#include "mcts.hpp"
#include "decoders.hpp"
#include "bench.hpp"
