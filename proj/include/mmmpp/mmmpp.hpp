#pragma once

#include "mmmpp/error.hpp"
#include "mmmpp/random.hpp"
#include "mmmpp/linalg.hpp"
#include "mmmpp/distributions.hpp"
#include "mmmpp/model.hpp"
#include "mmmpp/parallel.hpp"
#include "mmmpp/likelihood.hpp"
#include "mmmpp/decoding.hpp"
#include "mmmpp/stats.hpp"
#include "mmmpp/simulation.hpp"
#include "mmmpp/optimize.hpp"
#include "mmmpp/estimation.hpp"
#include "mmmpp/derived.hpp"
#include "mmmpp/io.hpp"
