#pragma once

#include "urbanform/composite.hpp"
#include "urbanform/error.hpp"
#include "urbanform/eval.hpp"
#include "urbanform/experiments.hpp"
#include "urbanform/glcm_rf.hpp"
#include "urbanform/labeler.hpp"
#include "urbanform/raster.hpp"
#include "urbanform/sampler.hpp"
#include "urbanform/segnet.hpp"
#include "urbanform/synthcity.hpp"
#include "urbanform/tensor.hpp"
#include "urbanform/text.hpp"
#include "urbanform/timeseries.hpp"
