#pragma once

// Umbrella header.
#include "acquisition.hpp"
#include "bessel.hpp"
#include "config.hpp"
#include "error.hpp"
#include "gradient.hpp"
#include "io.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "nifti.hpp"
#include "objective.hpp"
#include "optimizer.hpp"
#include "parallel.hpp"
#include "phantom.hpp"
#include "pipeline.hpp"
#include "vec3.hpp"
#include "volume.hpp"
