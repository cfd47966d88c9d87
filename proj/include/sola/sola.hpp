#pragma once

#include "sola/anomaly.hpp"
#include "sola/asrm.hpp"
#include "sola/attention.hpp"
#include "sola/backbone.hpp"
#include "sola/checkpoint.hpp"
#include "sola/data.hpp"
#include "sola/error.hpp"
#include "sola/gradcam.hpp"
#include "sola/harness.hpp"
#include "sola/image_io.hpp"
#include "sola/layers.hpp"
#include "sola/metrics.hpp"
#include "sola/model.hpp"
#include "sola/optim.hpp"
#include "sola/srm.hpp"
#include "sola/supervision.hpp"
#include "sola/tensor.hpp"
