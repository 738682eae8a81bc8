#pragma once

#include "countvb/benchmark.hpp"
#include "countvb/cli.hpp"
#include "countvb/csv.hpp"
#include "countvb/distributions.hpp"
#include "countvb/errors.hpp"
#include "countvb/model.hpp"
#include "countvb/oracle_mcmc.hpp"
#include "countvb/quadrature.hpp"
#include "countvb/simulate.hpp"
#include "countvb/special.hpp"
#include "countvb/spline_basis.hpp"
#include "countvb/vmp_core.hpp"
#include "countvb/vmp_stream.hpp"
