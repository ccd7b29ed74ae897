#pragma once

#include "conealign/error.hpp"
#include "conealign/matrix.hpp"
#include "conealign/random.hpp"
#include "conealign/tensor_io.hpp"
#include "conealign/synth.hpp"
#include "conealign/cone.hpp"
#include "conealign/sae.hpp"
#include "conealign/cbm.hpp"
#include "conealign/metrics.hpp"
#include "conealign/regress.hpp"
#include "conealign/report.hpp"
#include "conealign/sweep.hpp"
