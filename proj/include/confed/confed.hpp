#pragma once

#include "confed/errors.hpp"
#include "confed/rng.hpp"
#include "confed/linalg.hpp"
#include "confed/topology.hpp"
#include "confed/problem.hpp"
#include "confed/engine.hpp"
#include "confed/trace.hpp"
#include "confed/theory.hpp"
#include "confed/harness.hpp"
