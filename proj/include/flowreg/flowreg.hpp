#pragma once

// Umbrella header: the whole registration toolkit.

#include "flowreg/affine.hpp"
#include "flowreg/autodiff.hpp"
#include "flowreg/grid.hpp"
#include "flowreg/interp.hpp"
#include "flowreg/io.hpp"
#include "flowreg/lbfgs.hpp"
#include "flowreg/metrics.hpp"
#include "flowreg/optimize.hpp"
#include "flowreg/pipeline.hpp"
#include "flowreg/programs.hpp"
#include "flowreg/similarity.hpp"
#include "flowreg/smoothing.hpp"
#include "flowreg/stencil.hpp"
#include "flowreg/synth.hpp"
#include "flowreg/vsvf.hpp"
