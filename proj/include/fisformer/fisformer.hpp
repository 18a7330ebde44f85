#pragma once

#include "fisformer/attention.hpp"
#include "fisformer/checkpoint.hpp"
#include "fisformer/config.hpp"
#include "fisformer/data.hpp"
#include "fisformer/evaluation.hpp"
#include "fisformer/fis.hpp"
#include "fisformer/layers.hpp"
#include "fisformer/membership.hpp"
#include "fisformer/metrics.hpp"
#include "fisformer/model.hpp"
#include "fisformer/training.hpp"
