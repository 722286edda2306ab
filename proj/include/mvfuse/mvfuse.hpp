#pragma once

#include "mvfuse/tensor.hpp"
#include "mvfuse/autodiff.hpp"
#include "mvfuse/adam.hpp"
#include "mvfuse/views.hpp"
#include "mvfuse/encoders.hpp"
#include "mvfuse/metrics.hpp"
#include "mvfuse/missing.hpp"
#include "mvfuse/fusion.hpp"
#include "mvfuse/data.hpp"
#include "mvfuse/harness.hpp"
