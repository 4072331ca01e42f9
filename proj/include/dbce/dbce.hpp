#ifndef DBCE_DBCE_HPP
#define DBCE_DBCE_HPP

#include "dbce/grid.hpp"
#include "dbce/io.hpp"
#include "dbce/losses.hpp"
#include "dbce/metrics.hpp"
#include "dbce/morphology.hpp"
#include "dbce/nnet.hpp"
#include "dbce/rng.hpp"
#include "dbce/synthdata.hpp"
#include "dbce/trainer.hpp"
#include "dbce/weighting.hpp"

#endif // DBCE_DBCE_HPP
